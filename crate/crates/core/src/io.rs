//! Raw little-endian array files with a JSON `{"dtype", "shape"}` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Clone + Default> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::default(); shape.iter().product()],
        }
    }
}

impl<T> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    shape: Vec<usize>,
}

/// Element types the codec knows how to store.
pub trait Element: Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// `foo.bin` -> `foo.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn encode<T: Element>(a: &Array<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.data.len() * T::SIZE);
    for v in &a.data {
        v.write_le(&mut out);
    }
    out
}

pub fn write_array<T: Element>(path: &Path, a: &Array<T>) -> Result<()> {
    fs::write(path, encode(a)).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        dtype: T::DTYPE.to_string(),
        shape: a.shape.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec(&side)?).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

pub fn read_array<T: Element>(path: &Path) -> Result<Array<T>> {
    let sp = sidecar_path(path);
    let side: Sidecar = serde_json::from_slice(&fs::read(&sp).map_err(|e| Error::io(&sp, e))?)?;
    if side.dtype != T::DTYPE {
        return Err(Error::Invalid(format!(
            "{}: dtype {} but expected {}",
            path.display(),
            side.dtype,
            T::DTYPE
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * T::SIZE {
        return Err(Error::Shape(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            bytes.len(),
            side.shape
        )));
    }
    let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
    Array::new(side.shape, data)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_arrays_round_trip(data in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("a.bin");
            let a = Array::new(vec![data.len()], data).unwrap();
            write_array(&p, &a).unwrap();
            prop_assert_eq!(read_array::<f32>(&p).unwrap(), a);
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_array(&p, &Array::new(vec![2, 2], vec![0u8, 1, 1, 0]).unwrap()).unwrap();
        assert!(read_array::<f32>(&p).is_err());
        let back = read_array::<u8>(&p).unwrap();
        assert_eq!(back.data, vec![0, 1, 1, 0]);
        let side = std::fs::read_to_string(dir.path().join("m.json")).unwrap();
        assert_eq!(side, r#"{"dtype":"u8","shape":[2,2]}"#);
    }
}
