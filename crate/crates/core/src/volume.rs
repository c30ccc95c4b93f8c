//! Scalar volumes, label grids and their `VOL-1` file pair.
//!
//! Axis order is `[D, H, W]` with `W` fastest. Normalized coordinate `x`
//! follows `D`, `y` follows `H` and `z` follows `W`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

pub const VOLUME_VERSION: &str = "VOL-1";

/// Affine map from voxel index `(d, h, w)` to normalized coordinates, stored
/// as a row-major 3×4 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [f64; 12]);

impl Affine {
    /// Voxel-center convention: index 0 maps to −1 and index `n − 1` to +1.
    pub fn voxel_centered(dims: [usize; 3]) -> Self {
        let s = dims.map(|n| if n > 1 { 2.0 / (n - 1) as f64 } else { 1.0 });
        Affine([s[0], 0.0, 0.0, -1.0, 0.0, s[1], 0.0, -1.0, 0.0, 0.0, s[2], -1.0])
    }

    fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn determinant(&self) -> f64 {
        let a = self.linear();
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::invalid("Affine::inverse", "transform is singular"));
        }
        let a = self.linear();
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
            }
        }
        let t = [self.0[3], self.0[7], self.0[11]];
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 4..i * 4 + 3].copy_from_slice(&inv[i]);
            out[i * 4 + 3] = -(inv[i][0] * t[0] + inv[i][1] * t[1] + inv[i][2] * t[2]);
        }
        Ok(Affine(out))
    }
}

/// 3D intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    pub transform: Affine,
}

impl Volume {
    /// Values are clamped to `[0, 1]`; non-finite values are rejected.
    pub fn new(dims: [usize; 3], mut data: Vec<f32>, transform: Affine) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n || n == 0 {
            return Err(Error::invalid(
                "Volume::new",
                format!("dims {dims:?} need {n} voxels, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("voxel {i} is not finite")));
        }
        transform.inverse()?;
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Volume { dims, data, transform })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume::new(dims, data, Affine::voxel_centered(dims))
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    /// Normalized position of voxel `(d, h, w)` (fractional indices allowed).
    pub fn position(&self, idx: Vec3) -> Vec3 {
        self.transform.apply(idx)
    }

    /// Length of one voxel diagonal in normalized units.
    pub fn voxel_diagonal(&self) -> f64 {
        let o = self.position([0.0; 3]);
        let p = self.position([1.0; 3]);
        crate::mesh::norm(crate::mesh::sub(p, o))
    }
}

/// Integer labels aligned with a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::invalid(
                "LabelGrid::new",
                format!("dims {dims:?} need {n} labels, got {}", labels.len()),
            ));
        }
        Ok(LabelGrid { dims, labels })
    }

    /// Indicator volume of one label, for surface extraction.
    pub fn indicator(&self, label: u8, transform: Affine) -> Result<Volume> {
        let data = self.labels.iter().map(|&l| if l == label { 1.0 } else { 0.0 }).collect();
        Volume::new(self.dims, data, transform)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    transform: Affine,
    dtype: String,
    version: String,
}

fn pair(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

fn write_pair(stem: &Path, header: &Header, blob: &[u8]) -> Result<()> {
    let (json, raw) = pair(stem);
    if let Some(dir) = json.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&json, serde_json::to_string_pretty(header).expect("header serializes"))
        .map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, blob).map_err(|e| Error::io(&raw, e))
}

fn read_pair(stem: &Path, dtype: &str, bytes_per: usize) -> Result<(Header, Vec<u8>)> {
    let (json, raw) = pair(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if header.version != VOLUME_VERSION {
        return Err(Error::format(&json, format!("expected version {VOLUME_VERSION}, found {}", header.version)));
    }
    if header.dtype != dtype {
        return Err(Error::format(&json, format!("expected dtype {dtype}, found {}", header.dtype)));
    }
    let blob = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.dims.iter().product();
    if blob.len() != n * bytes_per {
        return Err(Error::format(&raw, format!("expected {} bytes, found {}", n * bytes_per, blob.len())));
    }
    Ok((header, blob))
}

/// Writes `<stem>.json` and `<stem>.raw`.
pub fn save_volume(stem: &Path, vol: &Volume) -> Result<()> {
    let header = Header {
        dims: vol.dims,
        transform: vol.transform,
        dtype: "f32".into(),
        version: VOLUME_VERSION.into(),
    };
    let blob: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(stem, &header, &blob)
}

pub fn load_volume(stem: &Path) -> Result<Volume> {
    let (h, blob) = read_pair(stem, "f32", 4)?;
    let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(h.dims, data, h.transform).map_err(|e| Error::format(&stem.with_extension("json"), e.to_string()))
}

pub fn save_labels(stem: &Path, labels: &LabelGrid, transform: Affine) -> Result<()> {
    let header = Header {
        dims: labels.dims,
        transform,
        dtype: "u8".into(),
        version: VOLUME_VERSION.into(),
    };
    write_pair(stem, &header, &labels.labels)
}

pub fn load_labels(stem: &Path) -> Result<LabelGrid> {
    let (h, blob) = read_pair(stem, "u8", 1)?;
    LabelGrid::new(h.dims, blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_on_construction() {
        let v = Volume::new([1, 1, 3], vec![-0.5, 0.5, 2.0], Affine::voxel_centered([1, 1, 3])).unwrap();
        assert_eq!(v.data, vec![0.0, 0.5, 1.0]);
        assert!(Volume::new([1, 1, 1], vec![f32::NAN], Affine::voxel_centered([1, 1, 1])).is_err());
    }

    #[test]
    fn voxel_centered_corners() {
        let a = Affine::voxel_centered([32, 16, 8]);
        assert_eq!(a.apply([0.0, 0.0, 0.0]), [-1.0, -1.0, -1.0]);
        assert_eq!(a.apply([31.0, 15.0, 7.0]), [1.0, 1.0, 1.0]);
        let inv = a.inverse().unwrap();
        let p = inv.apply(a.apply([3.0, 4.0, 5.0]));
        for (x, y) in p.iter().zip([3.0, 4.0, 5.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_general_affine() {
        let a = Affine([2.0, 1.0, 0.0, 0.5, 0.0, 3.0, 1.0, -1.0, 1.0, 0.0, 1.0, 2.0]);
        let b = a.inverse().unwrap();
        let p = [0.3, -1.2, 4.0];
        let q = b.apply(a.apply(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
        assert!(Affine([0.0; 12]).inverse().is_err());
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([4, 5, 6], |d, h, w| (d * 31 + h * 7 + w) as f32 / 200.0 + 1e-7).unwrap();
        save_volume(&dir.path().join("v"), &v).unwrap();
        assert_eq!(load_volume(&dir.path().join("v")).unwrap(), v);
        let l = LabelGrid::new([2, 2, 2], vec![0, 1, 0, 1, 1, 1, 0, 0]).unwrap();
        save_labels(&dir.path().join("l"), &l, v.transform).unwrap();
        assert_eq!(load_labels(&dir.path().join("l")).unwrap(), l);
        assert!(load_volume(&dir.path().join("l")).is_err());
    }
}
