//! Raster file format: magic `TSER`, version, dtype, dimensions, then a
//! row-major little-endian payload. Roundtrips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSER";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl RasterData {
    fn dtype_code(&self) -> u8 {
        match self {
            RasterData::F32(_) => 0,
            RasterData::F64(_) => 1,
            RasterData::U16(_) => 2,
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            RasterData::F32(_) => 4,
            RasterData::F64(_) => 8,
            RasterData::U16(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::F64(v) => v.len(),
            RasterData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens any payload to `f64` values.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RasterData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            RasterData::F64(v) => v.clone(),
            RasterData::U16(v) => v.iter().map(|x| *x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub data: RasterData,
}

impl Raster {
    pub fn new(channels: u32, height: u32, width: u32, data: RasterData) -> Result<Self> {
        let expect = (channels * height * width) as usize;
        if data.len() != expect {
            return Err(Error::shape(format!(
                "raster: {channels}x{height}x{width} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Raster {
            channels,
            height,
            width,
            data,
        })
    }
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + raster.data.len() * raster.data.elem_size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(raster.data.dtype_code());
    buf.extend_from_slice(&raster.channels.to_le_bytes());
    buf.extend_from_slice(&raster.height.to_le_bytes());
    buf.extend_from_slice(&raster.width.to_le_bytes());
    match &raster.data {
        RasterData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        RasterData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        RasterData::U16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let buf = fs::read(path)?;
    if buf.len() < HEADER_LEN {
        return Err(Error::data(format!(
            "{}: truncated header, expected at least {HEADER_LEN} bytes, got {}",
            path.display(),
            buf.len()
        )));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic at byte offset 0 (expected \"TSER\")",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported version {version} at byte offset 4",
            path.display()
        )));
    }
    let dtype = buf[8];
    let channels = u32::from_le_bytes(buf[9..13].try_into().unwrap());
    let height = u32::from_le_bytes(buf[13..17].try_into().unwrap());
    let width = u32::from_le_bytes(buf[17..21].try_into().unwrap());
    let count = (channels as usize) * (height as usize) * (width as usize);
    let elem = match dtype {
        0 => 4,
        1 => 8,
        2 => 2,
        other => {
            return Err(Error::data(format!(
                "{}: unknown dtype {other} at byte offset 8",
                path.display()
            )));
        }
    };
    let expect = HEADER_LEN + count * elem;
    if buf.len() != expect {
        return Err(Error::data(format!(
            "{}: payload truncated at byte offset {}, expected {expect} bytes total, got {}",
            path.display(),
            buf.len().min(expect),
            buf.len()
        )));
    }
    let payload = &buf[HEADER_LEN..];
    let data = match dtype {
        0 => RasterData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        1 => RasterData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => RasterData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Raster::new(channels, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn f64_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tser");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-1e6..1e6)).collect();
        let r = Raster::new(2, 3, 4, RasterData::F64(data)).unwrap();
        write_raster(&path, &r).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back, r);
        write_raster(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn u16_roundtrip_preserves_class_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sem.tser");
        let data: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
        let r = Raster::new(1, 8, 8, RasterData::U16(data.clone())).unwrap();
        write_raster(&path, &r).unwrap();
        match read_raster(&path).unwrap().data {
            RasterData::U16(v) => assert_eq!(v, data),
            other => panic!("wrong dtype {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_expected_vs_actual() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tser");
        let r = Raster::new(1, 4, 4, RasterData::F32(vec![0.5; 16])).unwrap();
        write_raster(&path, &r).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, bytes).unwrap();
        let err = read_raster(&path).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("got"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tser");
        std::fs::write(&path, b"NOPE........................").unwrap();
        let err = read_raster(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }
}
