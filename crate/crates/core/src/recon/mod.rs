//! Reconstruction: the masked multicoil Fourier forward operator, the
//! STM/PSF temporal models, and the solvers built on them.

mod baselines;
mod loraks;
mod lps;
mod tikhonov;

pub use baselines::{data_sharing, psf_basis_from_acs, zero_filled};
pub use loraks::solve_structured_lowrank;
pub use lps::{solve_lps, LpsConfig, LpsResult};
pub use tikhonov::solve_tikhonov;

use nalgebra::DMatrix;
use ndarray::{Array3, Array4, Array5, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KtDataset, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::fft::{image_to_kspace, kspace_to_image};
use crate::grid::Grid;
use crate::maps::StmSet;

/// Masked multicoil Fourier forward operator: per frame, coil weighting,
/// unitary spatial DFT, and frame-dependent undersampling.
#[derive(Debug, Clone)]
pub struct ForwardOp {
    pub maps: SensitivityMaps,
    pub mask: SamplingMask,
}

impl ForwardOp {
    pub fn new(maps: SensitivityMaps, mask: SamplingMask) -> Result<Self> {
        if maps.grid != mask.grid {
            return Err(StmError::invariant("maps and mask grids disagree"));
        }
        Ok(ForwardOp { maps, mask })
    }

    pub fn grid(&self) -> Grid {
        self.maps.grid
    }

    pub fn coils(&self) -> usize {
        self.maps.coils
    }

    pub fn frames(&self) -> usize {
        self.mask.frames
    }

    /// A rho: (k,t)-space samples of the coil-weighted image series.
    pub fn apply(&self, img: &DynamicImage) -> Result<KtDataset> {
        if img.grid != self.grid() || img.frames != self.frames() {
            return Err(StmError::invariant("image geometry disagrees with operator"));
        }
        let [nx, ny, nz] = self.grid().dims();
        let q = self.coils();
        let t = self.frames();
        let volumes: Vec<((usize, usize), Array3<Complex64>)> = (0..q * t)
            .into_par_iter()
            .map(|idx| {
                let (coil, frame) = (idx / t, idx % t);
                let weighted = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
                    self.maps.values[(x, y, z, coil)] * img.values[(x, y, z, frame)]
                });
                let mut k = image_to_kspace(&weighted);
                for ((x, y, z), v) in k.indexed_iter_mut() {
                    if !self.mask.flags[(x, y, z, frame)] {
                        *v = Complex64::default();
                    }
                }
                ((coil, frame), k)
            })
            .collect();
        let mut samples = Array5::<Complex64>::zeros((nx, ny, nz, q, t));
        for ((coil, frame), k) in volumes {
            for ((x, y, z), v) in k.indexed_iter() {
                samples[(x, y, z, coil, frame)] = *v;
            }
        }
        KtDataset::new(self.grid(), samples, self.mask.clone())
    }

    /// A^H d: conjugate coil weighting of the inverse DFT of the masked
    /// samples, summed over coils.
    pub fn adjoint(&self, data: &KtDataset) -> Result<DynamicImage> {
        if data.grid != self.grid() || data.frames != self.frames() || data.coils != self.coils()
        {
            return Err(StmError::invariant("data geometry disagrees with operator"));
        }
        let [nx, ny, nz] = self.grid().dims();
        let q = self.coils();
        let t = self.frames();
        let frames: Vec<(usize, Array3<Complex64>)> = (0..t)
            .into_par_iter()
            .map(|frame| {
                let mut acc = Array3::<Complex64>::zeros((nx, ny, nz));
                for coil in 0..q {
                    let mut k = data.volume(coil, frame).to_owned();
                    for ((x, y, z), v) in k.indexed_iter_mut() {
                        if !self.mask.flags[(x, y, z, frame)] {
                            *v = Complex64::default();
                        }
                    }
                    let img = kspace_to_image(&k);
                    for ((x, y, z), v) in img.indexed_iter() {
                        acc[(x, y, z)] += self.maps.values[(x, y, z, coil)].conj() * v;
                    }
                }
                (frame, acc)
            })
            .collect();
        let mut values = Array4::<Complex64>::zeros((nx, ny, nz, t));
        for (frame, acc) in frames {
            for ((x, y, z), v) in acc.indexed_iter() {
                values[(x, y, z, frame)] = *v;
            }
        }
        DynamicImage::new(self.grid(), values)
    }
}

/// Stack of L spatial coefficient images.
#[derive(Debug, Clone)]
pub struct ComponentImages {
    pub grid: Grid,
    pub components: usize,
    pub values: Array4<Complex64>,
}

impl ComponentImages {
    pub fn zeros(grid: Grid, components: usize) -> Self {
        let [nx, ny, nz] = grid.dims();
        ComponentImages {
            grid,
            components,
            values: Array4::zeros((nx, ny, nz, components)),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn component(&self, l: usize) -> ndarray::ArrayView3<'_, Complex64> {
        self.values.index_axis(Axis(3), l)
    }
}

/// Temporal signal model: per-voxel STM bases or a global PSF basis.
#[derive(Debug, Clone)]
pub enum TemporalModel {
    Stm(StmSet),
    Psf {
        frames: usize,
        /// T x L, orthonormal columns
        basis: DMatrix<Complex64>,
    },
}

impl TemporalModel {
    pub fn components(&self) -> usize {
        match self {
            TemporalModel::Stm(s) => s.components,
            TemporalModel::Psf { basis, .. } => basis.ncols(),
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            TemporalModel::Stm(s) => s.frames,
            TemporalModel::Psf { frames, .. } => *frames,
        }
    }

    /// Restrict to the first `l` components.
    pub fn truncate(&self, l: usize) -> Result<TemporalModel> {
        if l == 0 || l > self.components() {
            return Err(StmError::config(format!(
                "cannot truncate {} components to {l}",
                self.components()
            )));
        }
        Ok(match self {
            TemporalModel::Stm(s) => TemporalModel::Stm(s.truncate(l)?),
            TemporalModel::Psf { frames, basis } => TemporalModel::Psf {
                frames: *frames,
                basis: basis.columns(0, l).clone_owned(),
            },
        })
    }

    /// rho(x,t) = sum_l s_l(x,t) rho_l(x) (STM) or phi_l(t) rho_l(x) (PSF).
    pub fn expand(&self, comps: &ComponentImages) -> Result<DynamicImage> {
        let l = self.components();
        if comps.components != l {
            return Err(StmError::invariant("component count disagrees with model"));
        }
        let [nx, ny, nz] = comps.grid.dims();
        let t = self.frames();
        let mut values = Array4::<Complex64>::zeros((nx, ny, nz, t));
        match self {
            TemporalModel::Stm(s) => {
                if s.grid != comps.grid {
                    return Err(StmError::invariant("map grid disagrees with components"));
                }
                ndarray::Zip::indexed(&mut values).par_for_each(|(x, y, z, ti), v| {
                    let mut acc = Complex64::default();
                    for j in 0..l {
                        acc += s.maps[(x, y, z, j, ti)] * comps.values[(x, y, z, j)];
                    }
                    *v = acc;
                });
            }
            TemporalModel::Psf { basis, .. } => {
                ndarray::Zip::indexed(&mut values).par_for_each(|(x, y, z, ti), v| {
                    let mut acc = Complex64::default();
                    for j in 0..l {
                        acc += basis[(ti, j)] * comps.values[(x, y, z, j)];
                    }
                    *v = acc;
                });
            }
        }
        DynamicImage::new(comps.grid, values)
    }

    /// Adjoint of [`expand`](Self::expand).
    pub fn adjoint_expand(&self, img: &DynamicImage) -> Result<ComponentImages> {
        let l = self.components();
        if img.frames != self.frames() {
            return Err(StmError::invariant("frame count disagrees with model"));
        }
        let [nx, ny, nz] = img.grid.dims();
        let mut values = Array4::<Complex64>::zeros((nx, ny, nz, l));
        match self {
            TemporalModel::Stm(s) => {
                if s.grid != img.grid {
                    return Err(StmError::invariant("map grid disagrees with image"));
                }
                ndarray::Zip::indexed(&mut values).par_for_each(|(x, y, z, j), v| {
                    let mut acc = Complex64::default();
                    for ti in 0..img.frames {
                        acc += s.maps[(x, y, z, j, ti)].conj() * img.values[(x, y, z, ti)];
                    }
                    *v = acc;
                });
            }
            TemporalModel::Psf { basis, .. } => {
                ndarray::Zip::indexed(&mut values).par_for_each(|(x, y, z, j), v| {
                    let mut acc = Complex64::default();
                    for ti in 0..img.frames {
                        acc += basis[(ti, j)].conj() * img.values[(x, y, z, ti)];
                    }
                    *v = acc;
                });
            }
        }
        Ok(ComponentImages {
            grid: img.grid,
            components: l,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Tikhonov,
    StructuredLowrank,
}

/// Solver configuration shared by the model-based reconstructions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconConfig {
    pub regularizer: Regularizer,
    pub lambda: f64,
    /// inner (CG) iteration cap
    pub max_iters: usize,
    pub tol: f64,
    /// structured-low-rank neighborhood radius
    pub loraks_radius: usize,
    /// structured-low-rank target rank
    pub loraks_rank: usize,
    /// majorize-minimize outer iterations
    pub outer_iters: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            regularizer: Regularizer::Tikhonov,
            lambda: 0.0,
            max_iters: 40,
            tol: 1e-9,
            loraks_radius: 2,
            loraks_rank: 24,
            outer_iters: 12,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(StmError::config("lambda must be nonnegative"));
        }
        if self.max_iters == 0 || self.outer_iters == 0 {
            return Err(StmError::config("iteration counts must be positive"));
        }
        Ok(())
    }
}

/// Result of the model-based solvers: component images, the expanded
/// series, and per-iteration relative residuals.
pub struct SolveResult {
    pub components: ComponentImages,
    pub image: DynamicImage,
    pub residuals: Vec<f64>,
}

pub(crate) fn dot(a: &Array4<Complex64>, b: &Array4<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Inner product between k-space datasets (acquired samples only carry
/// signal, the rest are zero).
pub fn kt_dot(a: &KtDataset, b: &KtDataset) -> Complex64 {
    a.samples
        .iter()
        .zip(b.samples.iter())
        .map(|(x, y)| x.conj() * y)
        .sum()
}
