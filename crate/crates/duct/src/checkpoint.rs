//! Named-tensor binary container used for model checkpoints.
//!
//! Layout: magic "DUCT", format version u16, tensor count u32, then per
//! tensor: name length u16, UTF-8 name, rank u8, dims as u32s, little-endian
//! f64 payload. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DuctError, Result};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"DUCT";
const VERSION: u16 = 1;

/// One named tensor: shape plus raw f64 payload in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self {
            dims: vec![v.len()],
            data: v,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(DuctError::Shape(format!(
                "tensor rank {} is not 2",
                self.dims.len()
            )));
        }
        Matrix::new(self.dims[0], self.dims[1], self.data.clone())
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(DuctError::Shape("tensor is not a scalar".into()));
        }
        Ok(self.data[0])
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(DuctError::Precondition(format!("duplicate tensor {name}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DuctError::Format {
                offset: 0,
                message: format!("missing tensor {name}"),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.dims.len() as u8);
            for d in &tensor.dims {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(DuctError::Format {
                    offset: *pos as u64,
                    message: format!("truncated while reading {what}"),
                });
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4, "magic")? != MAGIC {
            return Err(DuctError::Format {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(DuctError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().unwrap()) as usize;
        let mut out = TensorFile::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
            let name_offset = pos as u64;
            let name = std::str::from_utf8(take(&mut pos, name_len, "name")?)
                .map_err(|_| DuctError::Format {
                    offset: name_offset,
                    message: "invalid UTF-8 name".into(),
                })?
                .to_string();
            let rank = take(&mut pos, 1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize,
                );
            }
            let n: usize = if dims.is_empty() {
                1
            } else {
                dims.iter().product()
            };
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(
                    take(&mut pos, 8, "payload")?.try_into().unwrap(),
                ));
            }
            out.insert(&name, Tensor { dims, data })?;
        }
        if pos != buf.len() {
            return Err(DuctError::Format {
                offset: pos as u64,
                message: "trailing bytes after final tensor".into(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::new(1);
        let mut tf = TensorFile::new();
        tf.insert(
            "a/weight",
            Tensor::from_matrix(
                &Matrix::new(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap(),
            ),
        )
        .unwrap();
        tf.insert(
            "meta/seed",
            Tensor::scalar(f64::from_bits(0xDEADBEEFCAFEBABE)),
        )
        .unwrap();
        tf.insert("sims", Tensor::vector(vec![0.5, -0.25, 1.0]))
            .unwrap();
        let path = dir.path().join("ckpt.duct");
        tf.write(&path).unwrap();
        let back = TensorFile::read(&path).unwrap();
        assert_eq!(tf, back);
        assert_eq!(
            back.get("meta/seed").unwrap().data[0].to_bits(),
            0xDEADBEEFCAFEBABE
        );
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let mut tf = TensorFile::new();
        tf.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let path = dir.path().join("t.duct");
        tf.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.duct");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            TensorFile::read(&cut),
            Err(DuctError::Format { .. })
        ));

        let bad = dir.path().join("bad.duct");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(
            TensorFile::read(&bad),
            Err(DuctError::Format { .. })
        ));
    }
}
