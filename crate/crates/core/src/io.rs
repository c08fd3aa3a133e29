//! File formats: LTNT binary tensors with a JSON axis sidecar, and
//! 8/16-bit PGM label planes.
//!
//! LTNT layout: `b"LTNT"`, `u32` rank, `rank` x `u32` extents, then the
//! row-major `f64` payload. All integers and floats little endian.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

pub const LTNT_MAGIC: &[u8; 4] = b"LTNT";

#[derive(Debug, Serialize, Deserialize)]
struct AxesSidecar {
    axes: Vec<String>,
}

/// Encodes the tensor payload (no axis names).
pub fn encode_ltnt(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(LTNT_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for a in t.axes() {
        out.extend_from_slice(&(a.extent as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes an LTNT payload; axes are named `d0`, `d1`, ... unless `names` is given.
pub fn decode_ltnt(bytes: &[u8], names: Option<&[String]>, origin: &Path) -> Result<Tensor> {
    let bad = |d: &str| Error::format(origin, d);
    if bytes.len() < 8 || &bytes[..4] != LTNT_MAGIC {
        return Err(bad("missing LTNT magic"));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)? as usize;
    let extents: Vec<usize> = (0..rank)
        .map(|i| word(8 + 4 * i).map(|e| e as usize))
        .collect::<Result<_>>()?;
    let header = 8 + 4 * rank;
    let len: usize = extents.iter().product();
    if bytes.len() != header + 8 * len {
        return Err(bad(&format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            extents,
            8 * len
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let axes = match names {
        Some(n) if n.len() == rank => n.iter().zip(&extents).map(|(n, &e)| Axis::new(n, e)).collect(),
        Some(n) => {
            return Err(bad(&format!("sidecar lists {} axes for rank {rank}", n.len())));
        }
        None => extents.iter().enumerate().map(|(i, &e)| Axis::new(format!("d{i}"), e)).collect(),
    };
    Tensor::from_axes(axes, data).map_err(|e| bad(&e.to_string()))
}

/// The sidecar path for a tensor file: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the tensor and its axis-name sidecar.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ltnt(t)).map_err(|e| Error::io(path, e))?;
    let sidecar = AxesSidecar {
        axes: t.axis_names().iter().map(|s| s.to_string()).collect(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Reads a tensor, taking axis names from the sidecar when it exists.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let names = if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sc: AxesSidecar = serde_json::from_slice(&raw).map_err(|e| Error::format(&side, e.to_string()))?;
        Some(sc.axes)
    } else {
        None
    };
    decode_ltnt(&bytes, names.as_deref(), path)
}

/// A single-channel integer image plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u16>,
}

/// Writes a binary PGM, 8-bit when every value fits, 16-bit otherwise.
pub fn write_pgm(path: &Path, plane: &LabelPlane) -> Result<()> {
    let (w, h) = (plane.width as u32, plane.height as u32);
    let res = if plane.values.iter().all(|&v| v <= u8::MAX as u16) {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w, h, plane.values.iter().map(|&v| v as u8).collect())
                .ok_or_else(|| Error::format(path, "plane size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)
    } else {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, plane.values.clone())
            .ok_or_else(|| Error::format(path, "plane size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)
    };
    res.map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<LabelPlane> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let gray = img.to_luma16();
    let scale = if img.color().bits_per_pixel() <= 8 { 257 } else { 1 };
    Ok(LabelPlane {
        height: gray.height() as usize,
        width: gray.width() as usize,
        values: gray.into_raw().into_iter().map(|v| v / scale).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ltnt_header_is_bit_exact() {
        let t = Tensor::new(&[("a", 1), ("b", 2)], vec![1.0, -0.5]).unwrap();
        let bytes = encode_ltnt(&t);
        let mut expect = b"LTNT".to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn ltnt_rejects_truncation() {
        let t = Tensor::zeros(&[("a", 3)]).unwrap();
        let bytes = encode_ltnt(&t);
        let p = Path::new("mem");
        assert!(decode_ltnt(&bytes[..bytes.len() - 1], None, p).is_err());
        assert!(decode_ltnt(b"LTNX\0\0\0\0", None, p).is_err());
        let d = decode_ltnt(&bytes, None, p).unwrap();
        assert_eq!(d.axis_names(), vec!["d0"]);
    }

    #[test]
    fn files_round_trip_with_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ltnt");
        let t = Tensor::from_fn(&[("n", 1), ("c", 2), ("h", 3), ("w", 1)], |i| i as f64 / 3.0).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);

        let pgm = dir.path().join("plane.pgm");
        for max in [200u16, 4000] {
            let plane = LabelPlane {
                height: 2,
                width: 3,
                values: vec![0, 1, 2, 3, 4, max],
            };
            write_pgm(&pgm, &plane).unwrap();
            assert_eq!(read_pgm(&pgm).unwrap(), plane);
        }
    }
}
