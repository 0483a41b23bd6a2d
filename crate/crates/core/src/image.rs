//! Hounsfield-unit slices, binary masks and slice stacks, plus the HUV1
//! raster format used to move them between commands.
//!
//! HUV1 layout (all little-endian): magic `b"HUV1"`, `u16` version, `u32`
//! width, height and depth, `f32` spacing x, y, z in millimetres, then
//! `width·height·depth` `f32` values, slice-major then row-major. Masks are
//! stored as `0.0` / `1.0`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HUV_MAGIC: &[u8; 4] = b"HUV1";
pub const HUV_VERSION: u16 = 1;
const HUV_HEADER_LEN: usize = 4 + 2 + 3 * 4 + 3 * 4;

/// One 2-D grid of HU values, row-major, `x` along a row.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    /// Pixel size (x, y) in mm.
    pub spacing: [f32; 2],
    pub data: Vec<f32>,
}

impl Slice {
    pub fn new(width: usize, height: usize, spacing: [f32; 2], data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::dim(
                "slice",
                format!("{width}×{height} with {} values", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: [f32; 2], value: f32) -> Self {
        Self {
            width,
            height,
            spacing,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Slice) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        f64::from(self.spacing[0]) * f64::from(self.spacing[1])
    }
}

/// Binary 2-D mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(
                "mask",
                format!("{width}×{height} with {} values", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// `value ≥ 0.5` per pixel; the inverse of [`Mask::to_slice`].
    pub fn from_slice(s: &Slice) -> Self {
        Self {
            width: s.width,
            height: s.height,
            data: s.data.iter().map(|&v| v >= 0.5).collect(),
        }
    }

    pub fn to_slice(&self, spacing: [f32; 2]) -> Slice {
        Slice {
            width: self.width,
            height: self.height,
            spacing,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Stack of equally sized slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// Voxel size (x, y, z) in mm.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn from_slices(slices: &[Slice], thickness_mm: f32) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Usage("volume needs at least one slice".into()))?;
        let mut data = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            if !s.same_shape(first) {
                return Err(Error::dim(
                    "volume",
                    format!(
                        "slice {}×{} in a {}×{} stack",
                        s.width, s.height, first.width, first.height
                    ),
                ));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            width: first.width,
            height: first.height,
            depth: slices.len(),
            spacing: [first.spacing[0], first.spacing[1], thickness_mm],
            data,
        })
    }

    pub fn from_masks(masks: &[Mask], spacing: [f32; 3]) -> Result<Self> {
        let slices: Vec<Slice> = masks
            .iter()
            .map(|m| m.to_slice([spacing[0], spacing[1]]))
            .collect();
        Self::from_slices(&slices, spacing[2])
    }

    pub fn slice(&self, k: usize) -> Slice {
        let n = self.width * self.height;
        Slice {
            width: self.width,
            height: self.height,
            spacing: [self.spacing[0], self.spacing[1]],
            data: self.data[k * n..(k + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Slice> {
        (0..self.depth).map(|k| self.slice(k)).collect()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.slices().iter().map(Mask::from_slice).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HUV_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(HUV_MAGIC);
        out.extend_from_slice(&HUV_VERSION.to_le_bytes());
        for d in [self.width, self.height, self.depth] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HUV_HEADER_LEN {
            return Err(Error::format(path, "truncated header"));
        }
        if &bytes[..4] != HUV_MAGIC {
            return Err(Error::format(path, "bad magic, expected HUV1"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != HUV_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height, depth) = (u32_at(6), u32_at(10), u32_at(14));
        let spacing = [f32_at(18), f32_at(22), f32_at(26)];
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(depth))
            .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
        let payload = &bytes[HUV_HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(Error::format(
                path,
                format!(
                    "header declares {width}×{height}×{depth} values, payload holds {} bytes",
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            depth,
            spacing,
            data,
        })
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, v.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_volume() -> Volume {
        let slices: Vec<Slice> = (0..3)
            .map(|k| Slice::new(4, 2, [0.5, 0.5], (0..8).map(|i| (i * k) as f32 - 1000.5).collect()).unwrap())
            .collect();
        Volume::from_slices(&slices, 3.0).unwrap()
    }

    #[test]
    fn length_disagreeing_with_header_is_rejected() {
        let mut bytes = sample_volume().to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            Volume::from_bytes(&bytes, Path::new("t")),
            Err(Error::Format { .. })
        ));
        let mut bytes = sample_volume().to_bytes();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Volume::from_bytes(&bytes, Path::new("t")).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample_volume().to_bytes();
        bytes[0] = b'X';
        let err = Volume::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn mask_survives_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::new(3, 2, vec![true, false, false, true, true, false]).unwrap();
        let v = Volume::from_masks(&[m.clone()], [1.0, 1.0, 3.0]).unwrap();
        let p = dir.path().join("m.huv");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert!(back.data.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(back.masks()[0], m);
    }

    proptest! {
        #[test]
        fn huv_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, d in 1usize..4,
            seed in any::<u32>(),
        ) {
            let data: Vec<f32> = (0..w * h * d)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919)) & 0x7f7f_ffff))
                .collect();
            let v = Volume { width: w, height: h, depth: d, spacing: [0.3, 0.4, 3.0], data };
            let back = Volume::from_bytes(&v.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back.to_bytes(), v.to_bytes());
        }
    }
}
