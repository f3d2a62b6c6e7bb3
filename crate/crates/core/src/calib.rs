//! Calibration-matrix machinery: the kernel support, the convolutional
//! C matrix built from ACS data (kept as a small-size oracle), and the
//! fast path that assembles C^H C directly.
//!
//! Row convention: only neighborhoods fully interior to the ACS box form
//! rows, no circular wrap. The fast path reproduces this exactly by
//! evaluating, per frame pair and offset difference, a cross-correlation
//! restricted to the shifted interior window (summed-area tables), so it
//! agrees with the direct product to rounding error.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array3, ArrayView3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::KtDataset;
use crate::error::{Result, StmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportShape {
    Ellipsoid,
    Rectangle,
}

/// FIR kernel support: the set of integer k-space offsets within
/// `radius` of the origin, in the 2-norm (ellipsoid) or the max-norm
/// (rectangle). Offsets are unique and sorted lexicographically; the
/// vectorization order of all `|support| x frames` objects is
/// `column = frame * |support| + offset_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSupport {
    pub shape: SupportShape,
    pub radius: usize,
    pub dim: usize,
    pub offsets: Vec<[i64; 3]>,
}

impl KernelSupport {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Largest per-axis offset magnitude.
    pub fn margins(&self) -> [usize; 3] {
        let mut m = [0usize; 3];
        for off in &self.offsets {
            for ax in 0..3 {
                m[ax] = m[ax].max(off[ax].unsigned_abs() as usize);
            }
        }
        m
    }
}

/// Enumerate the kernel support offsets.
pub fn build_support(shape: SupportShape, radius: usize, dim: usize) -> Result<KernelSupport> {
    if radius == 0 {
        return Err(StmError::config("kernel radius must be >= 1"));
    }
    if dim != 2 && dim != 3 {
        return Err(StmError::config("kernel dimension must be 2 or 3"));
    }
    let r = radius as i64;
    let z_range = if dim == 3 { -r..=r } else { 0..=0 };
    let mut offsets = Vec::new();
    for x in -r..=r {
        for y in -r..=r {
            for z in z_range.clone() {
                let keep = match shape {
                    SupportShape::Ellipsoid => x * x + y * y + z * z <= r * r,
                    SupportShape::Rectangle => {
                        x.abs() <= r && y.abs() <= r && z.abs() <= r
                    }
                };
                if keep {
                    offsets.push([x, y, z]);
                }
            }
        }
    }
    offsets.sort();
    Ok(KernelSupport {
        shape,
        radius,
        dim,
        offsets,
    })
}

/// Hermitian Gram matrix C^H C of the calibration matrix.
#[derive(Debug, Clone)]
pub struct CalibGram {
    pub matrix: DMatrix<Complex64>,
    pub support: KernelSupport,
    pub frames: usize,
    /// extents of the ACS box the Gram was built from
    pub source_extents: [usize; 3],
}

impl CalibGram {
    pub fn n(&self) -> usize {
        self.support.len() * self.frames
    }

    /// Max deviation from Hermitian symmetry, relative to the largest entry.
    pub fn hermitian_error(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut scale = 0f64;
        let mut err = 0f64;
        for i in 0..n {
            for j in i..n {
                let a = self.matrix[(i, j)];
                let b = self.matrix[(j, i)].conj();
                scale = scale.max(a.norm());
                err = err.max((a - b).norm());
            }
        }
        if scale > 0.0 {
            err / scale
        } else {
            0.0
        }
    }
}

/// Per-frame ACS volumes of a single-coil dataset.
pub(crate) fn acs_volumes(acs: &KtDataset) -> Result<Vec<Array3<Complex64>>> {
    if acs.coils != 1 {
        return Err(StmError::config(
            "calibration expects a single (virtual) coil; combine coils first",
        ));
    }
    Ok((0..acs.frames).map(|t| acs.acs_volume(0, t)).collect())
}

/// Interior center ranges `[margin, extent - margin)` per axis.
fn interior(extents: [usize; 3], support: &KernelSupport) -> Result<[std::ops::Range<usize>; 3]> {
    let m = support.margins();
    let mut out = [0..0, 0..0, 0..0];
    for ax in 0..3 {
        if extents[ax] < 2 * m[ax] + 1 {
            return Err(StmError::config(format!(
                "acs extent {} on axis {ax} cannot hold a radius-{} neighborhood",
                extents[ax], support.radius
            )));
        }
        out[ax] = m[ax]..extents[ax] - m[ax];
    }
    Ok(out)
}

fn volume_extents(vols: &[Array3<Complex64>]) -> Result<[usize; 3]> {
    let first = vols
        .first()
        .ok_or_else(|| StmError::config("no calibration frames"))?;
    let e = [first.dim().0, first.dim().1, first.dim().2];
    for v in vols {
        if [v.dim().0, v.dim().1, v.dim().2] != e {
            return Err(StmError::invariant("calibration volumes differ in extent"));
        }
    }
    Ok(e)
}

/// Direct construction of the calibration matrix: one row per
/// neighborhood fully interior to the ACS box, frames concatenated as
/// column blocks. Memory grows as `I x |support| x frames`; intended as
/// the small-size oracle.
pub fn build_c_direct_volumes(
    vols: &[ArrayView3<Complex64>],
    support: &KernelSupport,
) -> Result<DMatrix<Complex64>> {
    let owned: Vec<Array3<Complex64>> = vols.iter().map(|v| v.to_owned()).collect();
    let e = volume_extents(&owned)?;
    let int = interior(e, support)?;
    let frames = owned.len();
    let n_centers: usize = int.iter().map(|r| r.len()).product();
    let cols = support.len() * frames;
    let mut c = DMatrix::<Complex64>::zeros(n_centers, cols);
    let mut row = 0usize;
    for kx in int[0].clone() {
        for ky in int[1].clone() {
            for kz in int[2].clone() {
                for (t, vol) in owned.iter().enumerate() {
                    for (i, off) in support.offsets.iter().enumerate() {
                        let ix = (kx as i64 - off[0]) as usize;
                        let iy = (ky as i64 - off[1]) as usize;
                        let iz = (kz as i64 - off[2]) as usize;
                        c[(row, t * support.len() + i)] = vol[(ix, iy, iz)];
                    }
                }
                row += 1;
            }
        }
    }
    Ok(c)
}

/// [`build_c_direct_volumes`] on the ACS region of a single-coil dataset.
pub fn build_c_direct(acs: &KtDataset, support: &KernelSupport) -> Result<DMatrix<Complex64>> {
    let vols = acs_volumes(acs)?;
    let views: Vec<ArrayView3<Complex64>> = vols.iter().map(|v| v.view()).collect();
    build_c_direct_volumes(&views, support)
}

/// Complex summed-area table with one layer of zero padding; `sum` over a
/// half-open box is an 8-corner lookup.
struct Sat {
    data: Vec<Complex64>,
    dims: [usize; 3],
}

impl Sat {
    fn build(p: &Array3<Complex64>) -> Sat {
        let (n0, n1, n2) = p.dim();
        let dims = [n0 + 1, n1 + 1, n2 + 1];
        let mut data = vec![Complex64::default(); dims[0] * dims[1] * dims[2]];
        let idx = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let v = p[(i, j, k)]
                        + data[idx(i, j + 1, k + 1)]
                        + data[idx(i + 1, j, k + 1)]
                        + data[idx(i + 1, j + 1, k)]
                        - data[idx(i, j, k + 1)]
                        - data[idx(i, j + 1, k)]
                        - data[idx(i + 1, j, k)]
                        + data[idx(i, j, k)];
                    data[idx(i + 1, j + 1, k + 1)] = v;
                }
            }
        }
        Sat { data, dims }
    }

    fn sum(&self, a: [usize; 3], b: [usize; 3]) -> Complex64 {
        let idx = |i: usize, j: usize, k: usize| (i * self.dims[1] + j) * self.dims[2] + k;
        self.data[idx(b[0], b[1], b[2])]
            - self.data[idx(a[0], b[1], b[2])]
            - self.data[idx(b[0], a[1], b[2])]
            - self.data[idx(b[0], b[1], a[2])]
            + self.data[idx(a[0], a[1], b[2])]
            + self.data[idx(a[0], b[1], a[2])]
            + self.data[idx(b[0], a[1], a[2])]
            - self.data[idx(a[0], a[1], a[2])]
    }
}

/// Fast exact assembly of C^H C from per-frame ACS volumes.
pub fn build_gram_volumes(
    vols: &[ArrayView3<Complex64>],
    support: &KernelSupport,
) -> Result<CalibGram> {
    let owned: Vec<Array3<Complex64>> = vols.iter().map(|v| v.to_owned()).collect();
    let e = volume_extents(&owned)?;
    let int = interior(e, support)?;
    let frames = owned.len();
    let ns = support.len();
    let n = ns * frames;

    // offset differences delta = l - l' with their (i', i) index pairs
    let mut pairs: BTreeMap<[i64; 3], Vec<(usize, usize)>> = BTreeMap::new();
    for (ip, lp) in support.offsets.iter().enumerate() {
        for (i, l) in support.offsets.iter().enumerate() {
            let delta = [l[0] - lp[0], l[1] - lp[1], l[2] - lp[2]];
            pairs.entry(delta).or_default().push((ip, i));
        }
    }
    let pairs: Vec<([i64; 3], Vec<(usize, usize)>)> = pairs.into_iter().collect();

    let frame_pairs: Vec<(usize, usize)> = (0..frames)
        .flat_map(|t1| (t1..frames).map(move |t2| (t1, t2)))
        .collect();

    let blocks: Vec<((usize, usize), DMatrix<Complex64>)> = frame_pairs
        .par_iter()
        .map(|&(t1, t2)| {
            let a1 = &owned[t1];
            let a2 = &owned[t2];
            let mut block = DMatrix::<Complex64>::zeros(ns, ns);
            for (delta, idx_pairs) in &pairs {
                // valid u range: u in [0,n) and u - delta in [0,n)
                let mut lo = [0i64; 3];
                let mut hi = [0i64; 3];
                let mut empty = false;
                for ax in 0..3 {
                    lo[ax] = 0i64.max(delta[ax]);
                    hi[ax] = (e[ax] as i64).min(e[ax] as i64 + delta[ax]);
                    if lo[ax] >= hi[ax] {
                        empty = true;
                    }
                }
                if empty {
                    continue;
                }
                let dims = [
                    (hi[0] - lo[0]) as usize,
                    (hi[1] - lo[1]) as usize,
                    (hi[2] - lo[2]) as usize,
                ];
                let prod = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
                    let u = [lo[0] as usize + i, lo[1] as usize + j, lo[2] as usize + k];
                    let v = [
                        (u[0] as i64 - delta[0]) as usize,
                        (u[1] as i64 - delta[1]) as usize,
                        (u[2] as i64 - delta[2]) as usize,
                    ];
                    a1[(u[0], u[1], u[2])].conj() * a2[(v[0], v[1], v[2])]
                });
                let sat = Sat::build(&prod);
                for &(ip, i) in idx_pairs {
                    let lprime = support.offsets[ip];
                    // window: u in interior - l', expressed in prod coords
                    let mut a = [0usize; 3];
                    let mut b = [0usize; 3];
                    for ax in 0..3 {
                        let start = int[ax].start as i64 - lprime[ax] - lo[ax];
                        let end = int[ax].end as i64 - lprime[ax] - lo[ax];
                        debug_assert!(start >= 0 && end <= dims[ax] as i64);
                        a[ax] = start as usize;
                        b[ax] = end as usize;
                    }
                    block[(ip, i)] = sat.sum(a, b);
                }
            }
            ((t1, t2), block)
        })
        .collect();

    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    for ((t1, t2), block) in blocks {
        for ip in 0..ns {
            for i in 0..ns {
                matrix[(t1 * ns + ip, t2 * ns + i)] = block[(ip, i)];
                if t1 != t2 {
                    matrix[(t2 * ns + i, t1 * ns + ip)] = block[(ip, i)].conj();
                }
            }
        }
    }
    Ok(CalibGram {
        matrix,
        support: support.clone(),
        frames,
        source_extents: e,
    })
}

/// Fast exact C^H C from the ACS region of a single-coil dataset.
pub fn build_gram_fft(acs: &KtDataset, support: &KernelSupport) -> Result<CalibGram> {
    let vols = acs_volumes(acs)?;
    let views: Vec<ArrayView3<Complex64>> = vols.iter().map(|v| v.view()).collect();
    build_gram_volumes(&views, support)
}
