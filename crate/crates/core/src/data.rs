//! Canonical data model: (k,t)-space datasets, sampling masks, dynamic
//! image series, coil sensitivities and ROI masks.
//!
//! Array layout is fixed once for the whole toolkit: row-major with axis
//! order (k_x, k_y, k_z, coil, frame) for k-space data and
//! (x, y, z, frame) for image series. k-space axes are stored centered
//! (DC at index `n/2`), so the ACS box is a literal index range.

use ndarray::{Array2, Array3, Array4, Array5, ArrayView3, Axis};
use num_complex::Complex64;

use crate::error::{Result, StmError};
use crate::grid::{AxisRange, Grid};
use crate::linalg;

/// Boolean acquisition pattern over (k_x, k_y, k_z, frame) plus the
/// autocalibration box, which is identical across frames.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    pub grid: Grid,
    pub frames: usize,
    pub flags: Array4<bool>,
    pub acs_box: [AxisRange; 3],
}

impl SamplingMask {
    pub fn new(
        grid: Grid,
        frames: usize,
        flags: Array4<bool>,
        acs_box: [AxisRange; 3],
    ) -> Result<Self> {
        let m = SamplingMask {
            grid,
            frames,
            flags,
            acs_box,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.grid.dims();
        if self.flags.dim() != (nx, ny, nz, self.frames) {
            return Err(StmError::invariant(format!(
                "mask extents {:?} disagree with grid {:?} x {} frames",
                self.flags.dim(),
                self.grid.dims(),
                self.frames
            )));
        }
        if self.frames == 0 {
            return Err(StmError::invariant("mask needs at least one frame"));
        }
        for (ax, r) in self.acs_box.iter().enumerate() {
            if r.is_empty() || r.end > self.grid.dims()[ax] {
                return Err(StmError::invariant(format!(
                    "acs range {}..{} out of bounds on axis {ax}",
                    r.start, r.end
                )));
            }
        }
        // The ACS box must be acquired in every frame.
        for t in 0..self.frames {
            for x in self.acs_box[0].iter() {
                for y in self.acs_box[1].iter() {
                    for z in self.acs_box[2].iter() {
                        if !self.flags[(x, y, z, t)] {
                            return Err(StmError::invariant(format!(
                                "acs sample ({x},{y},{z}) missing in frame {t}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Fully sampled mask with the given ACS box metadata.
    pub fn full(grid: Grid, frames: usize, acs_box: [AxisRange; 3]) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        SamplingMask::new(
            grid,
            frames,
            Array4::from_elem((nx, ny, nz, frames), true),
            acs_box,
        )
    }

    /// Acquired sample count in frame `t`.
    pub fn samples_in_frame(&self, t: usize) -> usize {
        self.flags
            .index_axis(Axis(3), t)
            .iter()
            .filter(|&&f| f)
            .count()
    }

    /// Acceleration factor `R = N*T / sum_t M(t)`.
    pub fn acceleration(&self) -> f64 {
        let total: usize = (0..self.frames).map(|t| self.samples_in_frame(t)).sum();
        (self.grid.n() * self.frames) as f64 / total as f64
    }

    pub fn acs_len(&self) -> usize {
        self.acs_box.iter().map(|r| r.len()).product()
    }
}

/// Complex samples on the (k,t)-space grid. Entries are zero wherever the
/// mask is false.
#[derive(Debug, Clone)]
pub struct KtDataset {
    pub grid: Grid,
    pub coils: usize,
    pub frames: usize,
    pub samples: Array5<Complex64>,
    pub mask: SamplingMask,
}

impl KtDataset {
    pub fn new(grid: Grid, samples: Array5<Complex64>, mask: SamplingMask) -> Result<Self> {
        let (nx, ny, nz, coils, frames) = samples.dim();
        let ds = KtDataset {
            grid,
            coils,
            frames,
            samples,
            mask,
        };
        if [nx, ny, nz] != grid.dims() {
            return Err(StmError::invariant(format!(
                "sample extents ({nx},{ny},{nz}) disagree with grid {:?}",
                grid.dims()
            )));
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coils == 0 || self.frames == 0 {
            return Err(StmError::invariant("dataset needs coils >= 1, frames >= 1"));
        }
        if self.mask.grid != self.grid || self.mask.frames != self.frames {
            return Err(StmError::invariant(
                "mask geometry disagrees with dataset geometry",
            ));
        }
        self.mask.validate()?;
        for ((x, y, z, q, t), v) in self.samples.indexed_iter() {
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(StmError::invariant(format!(
                    "non-finite sample at ({x},{y},{z},{q},{t})"
                )));
            }
            if !self.mask.flags[(x, y, z, t)] && (v.re != 0.0 || v.im != 0.0) {
                return Err(StmError::invariant(format!(
                    "nonzero sample off-mask at ({x},{y},{z},{q},{t})"
                )));
            }
        }
        Ok(())
    }

    /// ACS sub-volume of one coil and frame.
    pub fn acs_volume(&self, coil: usize, frame: usize) -> Array3<Complex64> {
        let b = &self.mask.acs_box;
        let v = self.samples.slice(ndarray::s![
            b[0].start..b[0].end,
            b[1].start..b[1].end,
            b[2].start..b[2].end,
            coil,
            frame
        ]);
        v.to_owned()
    }

    pub fn volume(&self, coil: usize, frame: usize) -> ArrayView3<'_, Complex64> {
        self.samples
            .view()
            .index_axis_move(Axis(4), frame)
            .index_axis_move(Axis(3), coil)
    }
}

/// Complex image-domain series rho(x, t).
#[derive(Debug, Clone)]
pub struct DynamicImage {
    pub grid: Grid,
    pub frames: usize,
    pub values: Array4<Complex64>,
}

impl DynamicImage {
    pub fn new(grid: Grid, values: Array4<Complex64>) -> Result<Self> {
        let (nx, ny, nz, frames) = values.dim();
        if [nx, ny, nz] != grid.dims() || frames == 0 {
            return Err(StmError::invariant("image extents disagree with grid"));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(StmError::invariant("image contains non-finite entries"));
        }
        Ok(DynamicImage {
            grid,
            frames,
            values,
        })
    }

    pub fn zeros(grid: Grid, frames: usize) -> Self {
        let [nx, ny, nz] = grid.dims();
        DynamicImage {
            grid,
            frames,
            values: Array4::zeros((nx, ny, nz, frames)),
        }
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, Complex64> {
        self.values.index_axis(Axis(3), t)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Casorati matrix (voxels x frames), voxel order row-major (x, y, z).
    pub fn casorati(&self) -> Array2<Complex64> {
        let n = self.grid.n();
        let view = self.values.view().into_shape_with_order((n, self.frames));
        view.expect("row-major layout").to_owned()
    }
}

/// Per-coil complex sensitivity maps c_q(x).
#[derive(Debug, Clone)]
pub struct SensitivityMaps {
    pub grid: Grid,
    pub coils: usize,
    pub values: Array4<Complex64>,
}

impl SensitivityMaps {
    pub fn new(grid: Grid, values: Array4<Complex64>) -> Result<Self> {
        let (nx, ny, nz, coils) = values.dim();
        if [nx, ny, nz] != grid.dims() || coils == 0 {
            return Err(StmError::invariant("map extents disagree with grid"));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(StmError::invariant("sensitivity maps contain non-finite entries"));
        }
        Ok(SensitivityMaps {
            grid,
            coils,
            values,
        })
    }

    /// Uniform single-coil maps (c == 1).
    pub fn uniform(grid: Grid) -> Self {
        let [nx, ny, nz] = grid.dims();
        SensitivityMaps {
            grid,
            coils: 1,
            values: Array4::from_elem((nx, ny, nz, 1), Complex64::new(1.0, 0.0)),
        }
    }

    pub fn coil(&self, q: usize) -> ArrayView3<'_, Complex64> {
        self.values.index_axis(Axis(3), q)
    }

    /// Per-voxel sum of squares, max over the grid.
    pub fn max_sos(&self) -> f64 {
        let (nx, ny, nz, _) = self.values.dim();
        let mut m = 0f64;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let s: f64 = (0..self.coils)
                        .map(|q| self.values[(x, y, z, q)].norm_sqr())
                        .sum();
                    m = m.max(s);
                }
            }
        }
        m
    }
}

/// Boolean region-of-interest mask over voxels.
#[derive(Debug, Clone)]
pub struct RoiMask {
    pub grid: Grid,
    pub flags: Array3<bool>,
}

impl RoiMask {
    pub fn new(grid: Grid, flags: Array3<bool>) -> Result<Self> {
        let (nx, ny, nz) = flags.dim();
        if [nx, ny, nz] != grid.dims() {
            return Err(StmError::invariant("roi extents disagree with grid"));
        }
        Ok(RoiMask { grid, flags })
    }

    pub fn full(grid: Grid) -> Self {
        let [nx, ny, nz] = grid.dims();
        RoiMask {
            grid,
            flags: Array3::from_elem((nx, ny, nz), true),
        }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Result of [`coil_compress`].
pub struct CoilCompression {
    pub dataset: KtDataset,
    /// Q x Q_out projection matrix applied to the coil dimension.
    pub matrix: Array2<Complex64>,
    /// Fraction of total singular energy retained by the kept coils.
    pub retained_energy: f64,
    /// All squared singular values (descending) of the stacked sample matrix.
    pub spectrum: Vec<f64>,
}

/// SVD-based coil compression: stacks every acquired sample into a
/// (samples x Q) matrix and projects onto its top `q_out` right singular
/// vectors.
pub fn coil_compress(ds: &KtDataset, q_out: usize) -> Result<CoilCompression> {
    if q_out < 1 {
        return Err(StmError::config("q_out must be >= 1"));
    }
    if q_out > ds.coils {
        return Err(StmError::config(format!(
            "q_out = {q_out} exceeds coil count {}",
            ds.coils
        )));
    }
    let q = ds.coils;
    // Gram of the stacked sample matrix: sum over acquired (k, t) of the
    // outer product of the per-coil sample vector.
    let mut gram = nalgebra::DMatrix::<Complex64>::zeros(q, q);
    let mut any = false;
    let (nx, ny, nz, _, _) = ds.samples.dim();
    let mut row = vec![Complex64::default(); q];
    for t in 0..ds.frames {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !ds.mask.flags[(x, y, z, t)] {
                        continue;
                    }
                    any = true;
                    for (c, r) in row.iter_mut().enumerate() {
                        *r = ds.samples[(x, y, z, c, t)];
                    }
                    for i in 0..q {
                        for j in 0..q {
                            gram[(i, j)] += row[i].conj() * row[j];
                        }
                    }
                }
            }
        }
    }
    if !any {
        return Err(StmError::config("cannot compress a dataset with an empty mask"));
    }
    let (vals, vecs) = linalg::hermitian_eig(&gram)?;
    let spectrum: Vec<f64> = vals.iter().rev().map(|v| v.max(0.0)).collect();
    let total: f64 = spectrum.iter().sum();
    let kept: f64 = spectrum.iter().take(q_out).sum();
    // top right singular vectors = leading eigenvectors of the Gram
    let mut proj = Array2::<Complex64>::zeros((q, q_out));
    for j in 0..q_out {
        let col = vecs.column(q - 1 - j);
        for i in 0..q {
            proj[(i, j)] = col[i];
        }
    }
    let mut out = Array5::<Complex64>::zeros((nx, ny, nz, q_out, ds.frames));
    for t in 0..ds.frames {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !ds.mask.flags[(x, y, z, t)] {
                        continue;
                    }
                    for j in 0..q_out {
                        let mut acc = Complex64::default();
                        for c in 0..q {
                            acc += ds.samples[(x, y, z, c, t)] * proj[(c, j)];
                        }
                        out[(x, y, z, j, t)] = acc;
                    }
                }
            }
        }
    }
    let dataset = KtDataset::new(ds.grid, out, ds.mask.clone())?;
    Ok(CoilCompression {
        dataset,
        matrix: proj,
        retained_energy: if total > 0.0 { kept / total } else { 1.0 },
        spectrum,
    })
}
