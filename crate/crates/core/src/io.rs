//! Dataset directory format.
//!
//! A dataset is a directory holding `manifest.json` plus one raw blob per
//! array. Blobs are little-endian, row-major with the axis order declared
//! in the manifest; complex data is stored as interleaved re/im `f32`
//! (`dtype = "c64"`), boolean flags as `u8`, real fields as `f32`. All
//! extents are derivable from the manifest alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, Array5};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KtDataset, RoiMask, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::grid::{AxisRange, Grid};

pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub axes: Vec<String>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub dims: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coils: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acs_box: Option<[[usize; 2]; 3]>,
    pub arrays: Vec<ArrayEntry>,
}

/// The four kinds handled by [`write_dataset`] / [`read_dataset`].
pub enum Dataset {
    Kt(KtDataset),
    Image(DynamicImage),
    Sensitivity(SensitivityMaps),
    Mask(SamplingMask),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Kt(_) => "kt",
            Dataset::Image(_) => "image",
            Dataset::Sensitivity(_) => "sensitivity",
            Dataset::Mask(_) => "mask",
        }
    }
}

fn check_len(len: usize) -> Result<()> {
    if len >= MAX_ELEMENTS {
        return Err(StmError::format(format!(
            "array of {len} elements exceeds the 2^31 element limit"
        )));
    }
    Ok(())
}

pub(crate) fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    let mut f = File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub(crate) fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(StmError::format(format!(
            "missing manifest at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != 1 {
        return Err(StmError::format(format!(
            "unsupported manifest version {}",
            m.version
        )));
    }
    Ok(m)
}

pub(crate) fn write_c64_blob<'a>(
    dir: &Path,
    file: &str,
    data: impl Iterator<Item = &'a Complex64>,
    len: usize,
) -> Result<()> {
    check_len(len)?;
    let mut w = BufWriter::new(File::create(dir.join(file))?);
    let mut count = 0usize;
    for v in data {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
        count += 1;
    }
    debug_assert_eq!(count, len);
    w.flush()?;
    Ok(())
}

pub(crate) fn read_c64_blob(dir: &Path, file: &str, len: usize) -> Result<Vec<Complex64>> {
    check_len(len)?;
    let path = dir.join(file);
    if !path.exists() {
        return Err(StmError::format(format!("missing blob {}", path.display())));
    }
    let expected = len as u64 * 8;
    let actual = std::fs::metadata(&path)?.len();
    if actual != expected {
        return Err(StmError::format(format!(
            "blob {} has {actual} bytes, expected {expected}",
            path.display()
        )));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 8];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        let re = f32::from_le_bytes(buf[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(buf[4..8].try_into().unwrap());
        out.push(Complex64::new(re as f64, im as f64));
    }
    Ok(out)
}

pub(crate) fn write_u8_blob<'a>(
    dir: &Path,
    file: &str,
    data: impl Iterator<Item = &'a bool>,
    len: usize,
) -> Result<()> {
    check_len(len)?;
    let mut w = BufWriter::new(File::create(dir.join(file))?);
    for v in data {
        w.write_all(&[u8::from(*v)])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_u8_blob(dir: &Path, file: &str, len: usize) -> Result<Vec<bool>> {
    check_len(len)?;
    let path = dir.join(file);
    if !path.exists() {
        return Err(StmError::format(format!("missing blob {}", path.display())));
    }
    let actual = std::fs::metadata(&path)?.len();
    if actual != len as u64 {
        return Err(StmError::format(format!(
            "blob {} has {actual} bytes, expected {len}",
            path.display()
        )));
    }
    let mut bytes = Vec::with_capacity(len);
    File::open(path)?.read_to_end(&mut bytes)?;
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(StmError::format(format!(
                "invalid flag byte {other} in {file}"
            ))),
        })
        .collect()
}

pub(crate) fn write_f32_blob<'a>(
    dir: &Path,
    file: &str,
    data: impl Iterator<Item = &'a f64>,
    len: usize,
) -> Result<()> {
    check_len(len)?;
    let mut w = BufWriter::new(File::create(dir.join(file))?);
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_f32_blob(dir: &Path, file: &str, len: usize) -> Result<Vec<f64>> {
    check_len(len)?;
    let path = dir.join(file);
    if !path.exists() {
        return Err(StmError::format(format!("missing blob {}", path.display())));
    }
    let expected = len as u64 * 4;
    let actual = std::fs::metadata(&path)?.len();
    if actual != expected {
        return Err(StmError::format(format!(
            "blob {} has {actual} bytes, expected {expected}",
            path.display()
        )));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 4];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(out)
}

fn acs_to_manifest(acs: &[AxisRange; 3]) -> [[usize; 2]; 3] {
    [
        [acs[0].start, acs[0].end],
        [acs[1].start, acs[1].end],
        [acs[2].start, acs[2].end],
    ]
}

fn acs_from_manifest(m: &Manifest) -> Result<[AxisRange; 3]> {
    let raw = m
        .acs_box
        .ok_or_else(|| StmError::format("manifest is missing acs_box"))?;
    Ok([
        AxisRange::new(raw[0][0], raw[0][1]),
        AxisRange::new(raw[1][0], raw[1][1]),
        AxisRange::new(raw[2][0], raw[2][1]),
    ])
}

fn ensure_dir(path: &Path) -> Result<()> {
    if !path.exists() {
        let parent = path.parent().unwrap_or_else(|| Path::new("."));
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(StmError::format(format!(
                "parent directory {} does not exist",
                parent.display()
            )));
        }
        std::fs::create_dir(path)?;
    }
    Ok(())
}

/// Write one of the four dataset kinds as a directory.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ensure_dir(path)?;
    match ds {
        Dataset::Kt(kt) => {
            let manifest = Manifest {
                version: 1,
                kind: "kt".into(),
                dims: kt.grid.dims(),
                coils: Some(kt.coils),
                frames: Some(kt.frames),
                components: None,
                acs_box: Some(acs_to_manifest(&kt.mask.acs_box)),
                arrays: vec![
                    ArrayEntry {
                        name: "samples".into(),
                        file: "samples.bin".into(),
                        dtype: "c64".into(),
                        axes: vec!["kx".into(), "ky".into(), "kz".into(), "coil".into(), "frame".into()],
                        shape: kt.samples.shape().to_vec(),
                    },
                    ArrayEntry {
                        name: "mask".into(),
                        file: "mask.bin".into(),
                        dtype: "u8".into(),
                        axes: vec!["kx".into(), "ky".into(), "kz".into(), "frame".into()],
                        shape: kt.mask.flags.shape().to_vec(),
                    },
                ],
            };
            write_manifest(path, &manifest)?;
            write_c64_blob(path, "samples.bin", kt.samples.iter(), kt.samples.len())?;
            write_u8_blob(path, "mask.bin", kt.mask.flags.iter(), kt.mask.flags.len())?;
        }
        Dataset::Image(img) => {
            let manifest = Manifest {
                version: 1,
                kind: "image".into(),
                dims: img.grid.dims(),
                coils: None,
                frames: Some(img.frames),
                components: None,
                acs_box: None,
                arrays: vec![ArrayEntry {
                    name: "values".into(),
                    file: "values.bin".into(),
                    dtype: "c64".into(),
                    axes: vec!["x".into(), "y".into(), "z".into(), "frame".into()],
                    shape: img.values.shape().to_vec(),
                }],
            };
            write_manifest(path, &manifest)?;
            write_c64_blob(path, "values.bin", img.values.iter(), img.values.len())?;
        }
        Dataset::Sensitivity(maps) => {
            let manifest = Manifest {
                version: 1,
                kind: "sensitivity".into(),
                dims: maps.grid.dims(),
                coils: Some(maps.coils),
                frames: None,
                components: None,
                acs_box: None,
                arrays: vec![ArrayEntry {
                    name: "values".into(),
                    file: "values.bin".into(),
                    dtype: "c64".into(),
                    axes: vec!["x".into(), "y".into(), "z".into(), "coil".into()],
                    shape: maps.values.shape().to_vec(),
                }],
            };
            write_manifest(path, &manifest)?;
            write_c64_blob(path, "values.bin", maps.values.iter(), maps.values.len())?;
        }
        Dataset::Mask(mask) => {
            let manifest = Manifest {
                version: 1,
                kind: "mask".into(),
                dims: mask.grid.dims(),
                coils: None,
                frames: Some(mask.frames),
                components: None,
                acs_box: Some(acs_to_manifest(&mask.acs_box)),
                arrays: vec![ArrayEntry {
                    name: "flags".into(),
                    file: "flags.bin".into(),
                    dtype: "u8".into(),
                    axes: vec!["kx".into(), "ky".into(), "kz".into(), "frame".into()],
                    shape: mask.flags.shape().to_vec(),
                }],
            };
            write_manifest(path, &manifest)?;
            write_u8_blob(path, "flags.bin", mask.flags.iter(), mask.flags.len())?;
        }
    }
    Ok(())
}

fn entry<'a>(m: &'a Manifest, name: &str) -> Result<&'a ArrayEntry> {
    m.arrays
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| StmError::format(format!("manifest lacks array '{name}'")))
}

fn expect_shape(e: &ArrayEntry, shape: &[usize]) -> Result<()> {
    if e.shape != shape {
        return Err(StmError::format(format!(
            "array '{}' shape {:?} disagrees with manifest geometry {:?}",
            e.name, e.shape, shape
        )));
    }
    Ok(())
}

fn read_mask_from(dir: &Path, m: &Manifest, array: &str) -> Result<SamplingMask> {
    let grid = Grid::new(m.dims)?;
    let frames = m
        .frames
        .ok_or_else(|| StmError::format("manifest is missing frames"))?;
    let acs = acs_from_manifest(m)?;
    let e = entry(m, array)?;
    let [nx, ny, nz] = m.dims;
    expect_shape(e, &[nx, ny, nz, frames])?;
    let flags = read_u8_blob(dir, &e.file, nx * ny * nz * frames)?;
    let flags = Array4::from_shape_vec((nx, ny, nz, frames), flags)
        .map_err(|e| StmError::format(e.to_string()))?;
    SamplingMask::new(grid, frames, flags, acs)
}

/// Read a dataset directory written by [`write_dataset`]; validates the
/// invariants of the target type.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let m = read_manifest(path)?;
    let grid = Grid::new(m.dims)?;
    let [nx, ny, nz] = m.dims;
    match m.kind.as_str() {
        "kt" => {
            let coils = m
                .coils
                .ok_or_else(|| StmError::format("manifest is missing coils"))?;
            let frames = m
                .frames
                .ok_or_else(|| StmError::format("manifest is missing frames"))?;
            let e = entry(&m, "samples")?;
            expect_shape(e, &[nx, ny, nz, coils, frames])?;
            let raw = read_c64_blob(path, &e.file, nx * ny * nz * coils * frames)?;
            let samples = Array5::from_shape_vec((nx, ny, nz, coils, frames), raw)
                .map_err(|e| StmError::format(e.to_string()))?;
            let mask = read_mask_from(path, &m, "mask")?;
            Ok(Dataset::Kt(KtDataset::new(grid, samples, mask)?))
        }
        "image" => {
            let frames = m
                .frames
                .ok_or_else(|| StmError::format("manifest is missing frames"))?;
            let e = entry(&m, "values")?;
            expect_shape(e, &[nx, ny, nz, frames])?;
            let raw = read_c64_blob(path, &e.file, nx * ny * nz * frames)?;
            let values = Array4::from_shape_vec((nx, ny, nz, frames), raw)
                .map_err(|e| StmError::format(e.to_string()))?;
            Ok(Dataset::Image(DynamicImage::new(grid, values)?))
        }
        "sensitivity" => {
            let coils = m
                .coils
                .ok_or_else(|| StmError::format("manifest is missing coils"))?;
            let e = entry(&m, "values")?;
            expect_shape(e, &[nx, ny, nz, coils])?;
            let raw = read_c64_blob(path, &e.file, nx * ny * nz * coils)?;
            let values = Array4::from_shape_vec((nx, ny, nz, coils), raw)
                .map_err(|e| StmError::format(e.to_string()))?;
            Ok(Dataset::Sensitivity(SensitivityMaps::new(grid, values)?))
        }
        "mask" => Ok(Dataset::Mask(read_mask_from(path, &m, "flags")?)),
        other => Err(StmError::format(format!("unknown dataset kind '{other}'"))),
    }
}

pub fn read_kt(path: &Path) -> Result<KtDataset> {
    match read_dataset(path)? {
        Dataset::Kt(kt) => Ok(kt),
        other => Err(StmError::format(format!(
            "expected kind 'kt' at {}, found '{}'",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn read_image(path: &Path) -> Result<DynamicImage> {
    match read_dataset(path)? {
        Dataset::Image(img) => Ok(img),
        other => Err(StmError::format(format!(
            "expected kind 'image' at {}, found '{}'",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn read_sensitivity(path: &Path) -> Result<SensitivityMaps> {
    match read_dataset(path)? {
        Dataset::Sensitivity(m) => Ok(m),
        other => Err(StmError::format(format!(
            "expected kind 'sensitivity' at {}, found '{}'",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    match read_dataset(path)? {
        Dataset::Mask(m) => Ok(m),
        other => Err(StmError::format(format!(
            "expected kind 'mask' at {}, found '{}'",
            path.display(),
            other.kind()
        ))),
    }
}

/// ROI masks reuse the flag-blob layout with a single frame.
pub fn write_roi(path: &Path, roi: &RoiMask) -> Result<()> {
    ensure_dir(path)?;
    let manifest = Manifest {
        version: 1,
        kind: "roi".into(),
        dims: roi.grid.dims(),
        coils: None,
        frames: None,
        components: None,
        acs_box: None,
        arrays: vec![ArrayEntry {
            name: "flags".into(),
            file: "flags.bin".into(),
            dtype: "u8".into(),
            axes: vec!["x".into(), "y".into(), "z".into()],
            shape: roi.flags.shape().to_vec(),
        }],
    };
    write_manifest(path, &manifest)?;
    write_u8_blob(path, "flags.bin", roi.flags.iter(), roi.flags.len())
}

pub fn read_roi(path: &Path) -> Result<RoiMask> {
    let m = read_manifest(path)?;
    if m.kind != "roi" {
        return Err(StmError::format(format!(
            "expected kind 'roi', found '{}'",
            m.kind
        )));
    }
    let grid = Grid::new(m.dims)?;
    let [nx, ny, nz] = m.dims;
    let e = entry(&m, "flags")?;
    expect_shape(e, &[nx, ny, nz])?;
    let flags = read_u8_blob(path, &e.file, nx * ny * nz)?;
    let flags = Array3::from_shape_vec((nx, ny, nz), flags)
        .map_err(|e| StmError::format(e.to_string()))?;
    RoiMask::new(grid, flags)
}
