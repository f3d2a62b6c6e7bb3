//! Spatiotemporal maps: assemble the per-voxel Gram field G(x) from the
//! nullspace projector, extract per-voxel temporal bases, interpolate
//! coarse-grid maps, combine multichannel ACS data, and the L = 1
//! channels-as-frames special case that recovers sensitivity maps.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array3, Array4, Array5};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{build_gram_volumes, KernelSupport};
use crate::data::{KtDataset, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::fft::{eval_offset_spectrum, fourier_resize, image_to_kspace, kspace_to_image};
use crate::grid::Grid;
use crate::io;
use crate::linalg;
use crate::nullspace::{exact_projector, NullspaceProjector};

/// Per-voxel T x T Hermitian matrices on an evaluation grid, stored as
/// (voxel, t', t) with the row-major voxel order of [`Grid::voxel_index`].
#[derive(Debug, Clone)]
pub struct GramField {
    pub grid: Grid,
    pub frames: usize,
    pub values: Array3<Complex64>,
}

impl GramField {
    pub fn voxel_matrix(&self, vox: usize) -> DMatrix<Complex64> {
        let t = self.frames;
        DMatrix::from_fn(t, t, |i, j| self.values[(vox, i, j)])
    }

    /// Max Hermitian deviation over all voxels, relative to the largest
    /// entry magnitude.
    pub fn hermitian_error(&self) -> f64 {
        let (nvox, t, _) = self.values.dim();
        let mut scale = 0f64;
        let mut err = 0f64;
        for v in 0..nvox {
            for i in 0..t {
                for j in i..t {
                    let a = self.values[(v, i, j)];
                    let b = self.values[(v, j, i)].conj();
                    scale = scale.max(a.norm());
                    err = err.max((a - b).norm());
                }
            }
        }
        if scale > 0.0 {
            err / scale
        } else {
            0.0
        }
    }
}

/// Assemble G(x) on `eval_grid` from the projector: for each frame-pair
/// block of W, fold the entries onto the offset-difference lattice and
/// evaluate one zero-padded inverse FFT over the grid.
pub fn compute_gram_field(proj: &NullspaceProjector, eval_grid: &Grid) -> Result<GramField> {
    let support = &proj.support;
    let ns = support.len();
    let t = proj.frames;
    let dims = eval_grid.dims();
    let margins = support.margins();
    for ax in 0..3 {
        if dims[ax] < 2 * margins[ax] + 1 {
            return Err(StmError::config(format!(
                "evaluation grid axis {ax} of extent {} cannot hold the offset lattice",
                dims[ax]
            )));
        }
    }
    let nvox = eval_grid.n();
    let mut values = Array3::<Complex64>::zeros((nvox, t, t));
    let pairs: Vec<(usize, usize)> = (0..t)
        .flat_map(|t1| (t1..t).map(move |t2| (t1, t2)))
        .collect();
    // process in chunks: parallel FFTs, then sequential scatter
    for chunk in pairs.chunks(64) {
        let evaluated: Vec<((usize, usize), Array3<Complex64>)> = chunk
            .par_iter()
            .map(|&(t1, t2)| {
                let mut coeffs = Array3::<Complex64>::zeros((dims[0], dims[1], dims[2]));
                for (ip, lp) in support.offsets.iter().enumerate() {
                    for (i, l) in support.offsets.iter().enumerate() {
                        // [G(x)]_{t',t} = sum conj(W[(l',t'),(l,t)]) e^{i2pi(l-l').x}
                        let w = proj.w[(t1 * ns + ip, t2 * ns + i)].conj();
                        let bx = (l[0] - lp[0]).rem_euclid(dims[0] as i64) as usize;
                        let by = (l[1] - lp[1]).rem_euclid(dims[1] as i64) as usize;
                        let bz = (l[2] - lp[2]).rem_euclid(dims[2] as i64) as usize;
                        coeffs[(bx, by, bz)] += w;
                    }
                }
                ((t1, t2), eval_offset_spectrum(coeffs))
            })
            .collect();
        for ((t1, t2), grid_vals) in evaluated {
            for ((x, y, z), v) in grid_vals.indexed_iter() {
                let vox = eval_grid.voxel_index(x, y, z);
                values[(vox, t1, t2)] = *v;
                if t1 != t2 {
                    values[(vox, t2, t1)] = v.conj();
                }
            }
        }
    }
    Ok(GramField {
        grid: *eval_grid,
        frames: t,
        values,
    })
}

/// Direct oracle for [`compute_gram_field`]: materialize every filter's
/// spatial representation by explicit complex-exponential sums and form
/// H(x)^H H(x) per voxel. Cost grows with the filter count; small sizes
/// only.
pub fn gram_field_oracle(proj: &NullspaceProjector, eval_grid: &Grid) -> Result<GramField> {
    let support = &proj.support;
    let ns = support.len();
    let t = proj.frames;
    let n = ns * t;
    let dims = eval_grid.dims();
    let (vals, vecs) = linalg::hermitian_eig(&proj.w)?;
    // W = sum_r lambda_r v_r v_r^H; filters h_r = sqrt(lambda_r) v_r
    let filters: Vec<(f64, usize)> = vals
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 1e-12)
        .map(|(i, &l)| (l, i))
        .collect();
    let nvox = eval_grid.n();
    let mut values = Array3::<Complex64>::zeros((nvox, t, t));
    for vox in 0..nvox {
        let [x, y, z] = eval_grid.voxel_coords(vox);
        let mut h = DMatrix::<Complex64>::zeros(filters.len(), t);
        for (r, (lam, col)) in filters.iter().enumerate() {
            let scale = Complex64::new(lam.sqrt(), 0.0);
            for ti in 0..t {
                let mut acc = Complex64::default();
                for (i, off) in support.offsets.iter().enumerate() {
                    let idx = ti * ns + i;
                    debug_assert!(idx < n);
                    let ph = 2.0
                        * std::f64::consts::PI
                        * (off[0] as f64 * x as f64 / dims[0] as f64
                            + off[1] as f64 * y as f64 / dims[1] as f64
                            + off[2] as f64 * z as f64 / dims[2] as f64);
                    acc += vecs[(idx, *col)] * Complex64::new(ph.cos(), ph.sin());
                }
                h[(r, ti)] = scale * acc;
            }
        }
        let g = h.adjoint() * &h;
        for i in 0..t {
            for j in 0..t {
                values[(vox, i, j)] = g[(i, j)];
            }
        }
    }
    Ok(GramField {
        grid: *eval_grid,
        frames: t,
        values,
    })
}

/// Per-voxel orthonormal temporal bases with component count L.
#[derive(Debug, Clone)]
pub struct StmSet {
    pub grid: Grid,
    pub frames: usize,
    pub components: usize,
    /// (x, y, z, l, t); component order is ascending Gram eigenvalue
    pub maps: Array5<Complex64>,
    /// per-voxel eigenvalues matching the component order
    pub eigvals: Array4<f64>,
    /// per-voxel component count under the threshold rule, when used
    pub per_voxel_l: Option<Array3<usize>>,
}

impl StmSet {
    /// Restrict to the first `l` components (smallest eigenvalues).
    pub fn truncate(&self, l: usize) -> Result<StmSet> {
        if l == 0 || l > self.components {
            return Err(StmError::config(format!(
                "cannot truncate {} components to {l}",
                self.components
            )));
        }
        let (nx, ny, nz, _, t) = self.maps.dim();
        let maps = Array5::from_shape_fn((nx, ny, nz, l, t), |(x, y, z, j, ti)| {
            self.maps[(x, y, z, j, ti)]
        });
        let eigvals = Array4::from_shape_fn((nx, ny, nz, l), |(x, y, z, j)| {
            self.eigvals[(x, y, z, j)]
        });
        Ok(StmSet {
            grid: self.grid,
            frames: self.frames,
            components: l,
            maps,
            eigvals,
            per_voxel_l: self.per_voxel_l.clone(),
        })
    }

    /// Worst per-voxel orthonormality deviation of the component vectors.
    pub fn orthonormality_error(&self) -> f64 {
        let (nx, ny, nz, l, t) = self.maps.dim();
        let mut worst = 0f64;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    for a in 0..l {
                        for b in a..l {
                            let mut acc = Complex64::default();
                            let mut norm_a = 0f64;
                            for ti in 0..t {
                                let va = self.maps[(x, y, z, a, ti)];
                                let vb = self.maps[(x, y, z, b, ti)];
                                acc += va.conj() * vb;
                                norm_a += va.norm_sqr();
                            }
                            // skip all-zero vectors (outside support)
                            if norm_a < 1e-20 {
                                continue;
                            }
                            let expect = if a == b { 1.0 } else { 0.0 };
                            worst = worst.max((acc - Complex64::new(expect, 0.0)).norm());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Temporal basis of one voxel as a T x L matrix.
    pub fn voxel_basis(&self, x: usize, y: usize, z: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.frames, self.components, |t, l| {
            self.maps[(x, y, z, l, t)]
        })
    }
}

/// Component-count rule for [`extract_maps`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum ComponentRule {
    /// fixed global L
    Fixed(usize),
    /// per-voxel L(x) = count of eigenvalues below `rel` times the voxel
    /// maximum; maps are computed at the global maximum, capped at `max`
    Threshold { rel: f64, max: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// spectrum-inversion shift; default is a row-sum upper bound on the
    /// largest eigenvalue over the field
    pub shift: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            max_iters: 30,
            tol: 1e-8,
            seed: 0,
            shift: None,
        }
    }
}

fn row_sum_bound(field: &GramField) -> f64 {
    let (nvox, t, _) = field.values.dim();
    let mut bound = 0f64;
    for v in 0..nvox {
        for i in 0..t {
            let mut s = 0f64;
            for j in 0..t {
                s += field.values[(v, i, j)].norm();
            }
            bound = bound.max(s);
        }
    }
    bound
}

struct VoxelBasis {
    basis: DMatrix<Complex64>,
    eigvals: Vec<f64>,
    fallback: bool,
}

/// Smallest-eigenvalue invariant subspace of one voxel's Gram matrix by
/// orthogonal iteration on the shifted matrix, with a dense fallback.
fn extract_voxel(
    g: &DMatrix<Complex64>,
    l: usize,
    shift: f64,
    q0: &DMatrix<Complex64>,
    cfg: &ExtractConfig,
) -> Result<VoxelBasis> {
    let t = g.nrows();
    // shifted matrix B = shift I - G inverts the spectrum order
    let mut b = -g.clone();
    for i in 0..t {
        b[(i, i)] += Complex64::new(shift, 0.0);
    }
    let mut q = q0.clone();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let mut z = &b * &q;
        let kept = linalg::mgs_orthonormalize(&mut z);
        if kept < l {
            break; // degenerate iterate; use the fallback
        }
        let angle = linalg::subspace_max_angle(&q, &z);
        q = z;
        if angle < cfg.tol {
            converged = true;
            break;
        }
    }
    if converged {
        // Rayleigh-Ritz on G restricted to the converged subspace
        let m = q.ad_mul(&(g * &q));
        let (vals, vecs) = linalg::hermitian_eig(&m)?;
        let basis = &q * vecs;
        Ok(VoxelBasis {
            basis,
            eigvals: vals,
            fallback: false,
        })
    } else {
        let (vals, vecs) = linalg::hermitian_eig(g)?;
        let basis = vecs.columns(0, l).clone_owned();
        Ok(VoxelBasis {
            basis,
            eigvals: vals[0..l].to_vec(),
            fallback: true,
        })
    }
}

/// Extract per-voxel temporal bases from a Gram field: orthogonal
/// iteration on (shift I - G(x)) run simultaneously across voxels;
/// voxels that fail to converge fall back to a dense eigendecomposition.
pub fn extract_maps(field: &GramField, rule: ComponentRule, cfg: &ExtractConfig) -> Result<StmSet> {
    let t = field.frames;
    let nvox = field.grid.n();
    let (per_voxel_l, l) = match rule {
        ComponentRule::Fixed(l) => {
            if l == 0 || l > t {
                return Err(StmError::config(format!(
                    "component count {l} must lie in [1, {t}]"
                )));
            }
            (None, l)
        }
        ComponentRule::Threshold { rel, max } => {
            if !(rel > 0.0 && rel < 1.0) {
                return Err(StmError::config("threshold must lie in (0,1)"));
            }
            let counts: Vec<usize> = (0..nvox)
                .into_par_iter()
                .map(|vox| {
                    let g = field.voxel_matrix(vox);
                    let vals = linalg::hermitian_eigenvalues(&g);
                    let vmax = vals.last().copied().unwrap_or(0.0).max(0.0);
                    if vmax <= 0.0 {
                        return 1;
                    }
                    vals.iter().filter(|&&v| v < rel * vmax).count().max(1)
                })
                .collect();
            let global = counts.iter().copied().max().unwrap_or(1).min(max).min(t);
            let dims = field.grid.dims();
            let mut arr = Array3::<usize>::zeros((dims[0], dims[1], dims[2]));
            for (vox, &c) in counts.iter().enumerate() {
                let [x, y, z] = field.grid.voxel_coords(vox);
                arr[(x, y, z)] = c.min(global);
            }
            (Some(arr), global)
        }
    };

    let shift = cfg.shift.unwrap_or_else(|| row_sum_bound(field)) * (1.0 + 1e-9) + 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q0 = linalg::complex_gaussian(t, l, 1.0, &mut rng);
    linalg::mgs_orthonormalize(&mut q0);

    let results: Vec<Result<VoxelBasis>> = (0..nvox)
        .into_par_iter()
        .map(|vox| {
            let g = field.voxel_matrix(vox);
            extract_voxel(&g, l, shift, &q0, cfg)
        })
        .collect();

    let dims = field.grid.dims();
    let mut maps = Array5::<Complex64>::zeros((dims[0], dims[1], dims[2], l, t));
    let mut eigvals = Array4::<f64>::zeros((dims[0], dims[1], dims[2], l));
    let mut fallbacks = 0usize;
    for (vox, res) in results.into_iter().enumerate() {
        let vb = res?;
        if vb.fallback {
            fallbacks += 1;
        }
        let [x, y, z] = field.grid.voxel_coords(vox);
        for j in 0..l {
            eigvals[(x, y, z, j)] = vb.eigvals[j];
            for ti in 0..t {
                maps[(x, y, z, j, ti)] = vb.basis[(ti, j)];
            }
        }
    }
    if fallbacks > 0 {
        log::warn!(
            "orthogonal iteration fell back to dense eigendecomposition on {fallbacks}/{nvox} voxels"
        );
    }
    Ok(StmSet {
        grid: field.grid,
        frames: t,
        components: l,
        maps,
        eigvals,
        per_voxel_l,
    })
}

/// Fourier interpolation of a coarse-grid map set to `target`, followed
/// by per-voxel re-orthonormalization.
pub fn interpolate_maps(coarse: &StmSet, target: &Grid) -> Result<StmSet> {
    let (cx, cy, cz, l, t) = coarse.maps.dim();
    let tdims = target.dims();
    let mut maps = Array5::<Complex64>::zeros((tdims[0], tdims[1], tdims[2], l, t));
    let fields: Vec<((usize, usize), Array3<Complex64>)> = (0..l * t)
        .into_par_iter()
        .map(|idx| {
            let (j, ti) = (idx / t, idx % t);
            let src = Array3::from_shape_fn((cx, cy, cz), |(x, y, z)| {
                coarse.maps[(x, y, z, j, ti)]
            });
            ((j, ti), fourier_resize(&src, tdims))
        })
        .collect();
    for ((j, ti), f) in fields {
        for ((x, y, z), v) in f.indexed_iter() {
            maps[(x, y, z, j, ti)] = *v;
        }
    }
    // per-voxel re-orthonormalization in component order
    for x in 0..tdims[0] {
        for y in 0..tdims[1] {
            for z in 0..tdims[2] {
                let mut q = DMatrix::<Complex64>::from_fn(t, l, |ti, j| maps[(x, y, z, j, ti)]);
                linalg::mgs_orthonormalize(&mut q);
                for j in 0..l {
                    for ti in 0..t {
                        maps[(x, y, z, j, ti)] = q[(ti, j)];
                    }
                }
            }
        }
    }
    // eigenvalues: nearest-neighbor resample of the coarse field
    let mut eigvals = Array4::<f64>::zeros((tdims[0], tdims[1], tdims[2], l));
    for x in 0..tdims[0] {
        let sx = (x * cx) / tdims[0];
        for y in 0..tdims[1] {
            let sy = (y * cy) / tdims[1];
            for z in 0..tdims[2] {
                let sz = (z * cz) / tdims[2];
                for j in 0..l {
                    eigvals[(x, y, z, j)] = coarse.eigvals[(sx, sy, sz, j)];
                }
            }
        }
    }
    Ok(StmSet {
        grid: *target,
        frames: t,
        components: l,
        maps,
        eigvals,
        per_voxel_l: None,
    })
}

/// SENSE combination of multichannel ACS data into a virtual single-coil
/// low-resolution dataset: zero-pad outside the ACS box, inverse DFT per
/// coil and frame, combine per voxel, forward DFT, restrict to the box.
pub fn combine_acs(acs: &KtDataset, maps: &SensitivityMaps) -> Result<KtDataset> {
    if maps.grid != acs.grid {
        return Err(StmError::invariant("maps and dataset grids disagree"));
    }
    if maps.coils != acs.coils {
        return Err(StmError::invariant("maps and dataset coil counts disagree"));
    }
    let [nx, ny, nz] = acs.grid.dims();
    let b = acs.mask.acs_box;
    // denominator with a relative floor guarding zero-sensitivity voxels
    let mut sos = Array3::<f64>::zeros((nx, ny, nz));
    let mut max_sos = 0f64;
    for ((x, y, z), s) in sos.indexed_iter_mut() {
        *s = (0..acs.coils)
            .map(|q| maps.values[(x, y, z, q)].norm_sqr())
            .sum();
        max_sos = max_sos.max(*s);
    }
    if max_sos <= 0.0 {
        return Err(StmError::invariant("sensitivity maps are identically zero"));
    }
    let floor = 1e-6 * max_sos;

    let combined: Vec<(usize, Array3<Complex64>)> = (0..acs.frames)
        .into_par_iter()
        .map(|t| {
            let mut num = Array3::<Complex64>::zeros((nx, ny, nz));
            for q in 0..acs.coils {
                let mut k = Array3::<Complex64>::zeros((nx, ny, nz));
                for x in b[0].iter() {
                    for y in b[1].iter() {
                        for z in b[2].iter() {
                            k[(x, y, z)] = acs.samples[(x, y, z, q, t)];
                        }
                    }
                }
                let img = kspace_to_image(&k);
                for ((x, y, z), v) in img.indexed_iter() {
                    num[(x, y, z)] += maps.values[(x, y, z, q)].conj() * v;
                }
            }
            for ((x, y, z), v) in num.indexed_iter_mut() {
                *v /= sos[(x, y, z)].max(floor);
            }
            let mut k = image_to_kspace(&num);
            for ((x, y, z), v) in k.indexed_iter_mut() {
                if !(b[0].contains(x) && b[1].contains(y) && b[2].contains(z)) {
                    *v = Complex64::default();
                }
            }
            (t, k)
        })
        .collect();

    let mut samples = Array5::<Complex64>::zeros((nx, ny, nz, 1, acs.frames));
    for (t, k) in combined {
        for ((x, y, z), v) in k.indexed_iter() {
            samples[(x, y, z, 0, t)] = *v;
        }
    }
    // ACS-only mask for the virtual coil
    let mut flags = Array4::<bool>::from_elem((nx, ny, nz, acs.frames), false);
    for t in 0..acs.frames {
        for x in b[0].iter() {
            for y in b[1].iter() {
                for z in b[2].iter() {
                    flags[(x, y, z, t)] = true;
                }
            }
        }
    }
    let mask = SamplingMask::new(acs.grid, acs.frames, flags, b)?;
    KtDataset::new(acs.grid, samples, mask)
}

/// Sensitivity-map estimation as the L = 1, channels-as-frames special
/// case: calibrate on the first frame's multichannel ACS with the coil
/// axis playing the role of frames, extract the per-voxel nullspace
/// vector of the Q x Q Gram field, and fix normalization and
/// reference-coil phase.
pub fn estimate_sensitivity_maps(
    acs: &KtDataset,
    support: &KernelSupport,
    tau_rel: f64,
) -> Result<SensitivityMaps> {
    if acs.coils < 2 {
        return Err(StmError::config(
            "sensitivity estimation needs at least two coils",
        ));
    }
    let vols: Vec<Array3<Complex64>> = (0..acs.coils).map(|q| acs.acs_volume(q, 0)).collect();
    let views: Vec<_> = vols.iter().map(|v| v.view()).collect();
    let gram = build_gram_volumes(&views, support)?;
    let proj = exact_projector(&gram, tau_rel)?;
    if proj.filter_count() == 0 {
        return Err(StmError::numeric(
            "degenerate ACS: no annihilating filters found for sensitivity estimation",
        ));
    }
    let field = compute_gram_field(&proj, &acs.grid)?;
    let stm = extract_maps(&field, ComponentRule::Fixed(1), &ExtractConfig::default())?;
    let [nx, ny, nz] = acs.grid.dims();
    let q = acs.coils;
    let mut values = Array4::<Complex64>::zeros((nx, ny, nz, q));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut v: Vec<Complex64> =
                    (0..q).map(|c| stm.maps[(x, y, z, 0, c)]).collect();
                let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                if norm > 0.0 {
                    // reference phase: coil 0, or the strongest coil when
                    // coil 0 carries no signal at this voxel
                    let mut refc = v[0];
                    if refc.norm() < 1e-9 * norm {
                        refc = *v
                            .iter()
                            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                            .unwrap();
                    }
                    let phase = refc / Complex64::new(refc.norm(), 0.0);
                    let scale = phase * Complex64::new(norm, 0.0);
                    for c in v.iter_mut() {
                        *c /= scale;
                    }
                }
                for (c, val) in v.into_iter().enumerate() {
                    values[(x, y, z, c)] = val;
                }
            }
        }
    }
    SensitivityMaps::new(acs.grid, values)
}

/// Serialize an [`StmSet`] in the dataset directory format (kind `stm`).
pub fn write_stm(path: &Path, stm: &StmSet) -> Result<()> {
    if !path.exists() {
        std::fs::create_dir(path)?;
    }
    let manifest = io::Manifest {
        version: 1,
        kind: "stm".into(),
        dims: stm.grid.dims(),
        coils: None,
        frames: Some(stm.frames),
        components: Some(stm.components),
        acs_box: None,
        arrays: vec![
            io::ArrayEntry {
                name: "maps".into(),
                file: "maps.bin".into(),
                dtype: "c64".into(),
                axes: vec![
                    "x".into(),
                    "y".into(),
                    "z".into(),
                    "component".into(),
                    "frame".into(),
                ],
                shape: stm.maps.shape().to_vec(),
            },
            io::ArrayEntry {
                name: "eigvals".into(),
                file: "eigvals.bin".into(),
                dtype: "f32".into(),
                axes: vec!["x".into(), "y".into(), "z".into(), "component".into()],
                shape: stm.eigvals.shape().to_vec(),
            },
        ],
    };
    io::write_manifest(path, &manifest)?;
    io::write_c64_blob(path, "maps.bin", stm.maps.iter(), stm.maps.len())?;
    io::write_f32_blob(path, "eigvals.bin", stm.eigvals.iter(), stm.eigvals.len())?;
    Ok(())
}

pub fn read_stm(path: &Path) -> Result<StmSet> {
    let m = io::read_manifest(path)?;
    if m.kind != "stm" {
        return Err(StmError::format(format!(
            "expected kind 'stm', found '{}'",
            m.kind
        )));
    }
    let grid = Grid::new(m.dims)?;
    let frames = m
        .frames
        .ok_or_else(|| StmError::format("manifest is missing frames"))?;
    let components = m
        .components
        .ok_or_else(|| StmError::format("manifest is missing components"))?;
    let [nx, ny, nz] = m.dims;
    let entry = m
        .arrays
        .iter()
        .find(|e| e.name == "maps")
        .ok_or_else(|| StmError::format("manifest lacks array 'maps'"))?;
    if entry.shape != vec![nx, ny, nz, components, frames] {
        return Err(StmError::format("stm maps shape disagrees with manifest"));
    }
    let raw = io::read_c64_blob(path, &entry.file, nx * ny * nz * components * frames)?;
    let maps = Array5::from_shape_vec((nx, ny, nz, components, frames), raw)
        .map_err(|e| StmError::format(e.to_string()))?;
    let eig_entry = m
        .arrays
        .iter()
        .find(|e| e.name == "eigvals")
        .ok_or_else(|| StmError::format("manifest lacks array 'eigvals'"))?;
    let raw = io::read_f32_blob(path, &eig_entry.file, nx * ny * nz * components)?;
    let eigvals = Array4::from_shape_vec((nx, ny, nz, components), raw)
        .map_err(|e| StmError::format(e.to_string()))?;
    Ok(StmSet {
        grid,
        frames,
        components,
        maps,
        eigvals,
        per_voxel_l: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{build_gram_fft, build_support, SupportShape};
    use crate::data::DynamicImage;
    use crate::grid::AxisRange;
    use crate::nullspace::{sketched_projector, ProjectorMethod, SketchConfig};
    use crate::phantom::{
        generate_phantom_with_layout, simulate_acquisition, MultibandSpec,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projector_from_w(
        w: DMatrix<Complex64>,
        support: KernelSupport,
        frames: usize,
    ) -> NullspaceProjector {
        NullspaceProjector {
            w,
            rank_estimate: 0,
            method: ProjectorMethod::Exact,
            tau: 1e-3,
            sketch_dim: None,
            support,
            frames,
        spectrum: Vec::new(),
        }
    }

    #[test]
    fn identity_projector_gives_scaled_identity_field() {
        let support = build_support(SupportShape::Ellipsoid, 1, 2).unwrap();
        let t = 3;
        let n = support.len() * t;
        let proj = projector_from_w(DMatrix::identity(n, n), support.clone(), t);
        let grid = Grid::new_2d(6, 5).unwrap();
        let field = compute_gram_field(&proj, &grid).unwrap();
        for vox in 0..grid.n() {
            let g = field.voxel_matrix(vox);
            for i in 0..t {
                for j in 0..t {
                    let expect = if i == j { support.len() as f64 } else { 0.0 };
                    assert!((g[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-9);
                }
            }
        }
        // zero projector -> zero field
        let zero = projector_from_w(DMatrix::zeros(n, n), support, t);
        let f0 = compute_gram_field(&zero, &grid).unwrap();
        assert!(f0.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gram_field_matches_direct_oracle() {
        let support = build_support(SupportShape::Ellipsoid, 1, 2).unwrap();
        let t = 3;
        let n = support.len() * t;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = linalg::complex_gaussian(n, 6, 1.0, &mut rng);
        let proj = projector_from_w(&b * b.adjoint(), support, t);
        let grid = Grid::new_2d(8, 8).unwrap();
        let fast = compute_gram_field(&proj, &grid).unwrap();
        let oracle = gram_field_oracle(&proj, &grid).unwrap();
        let mut num = 0f64;
        let mut den = 0f64;
        for (a, b) in fast.values.iter().zip(oracle.values.iter()) {
            num += (a - b).norm_sqr();
            den += b.norm_sqr();
        }
        assert!(num.sqrt() < 1e-6 * den.sqrt(), "oracle mismatch");
        assert!(fast.hermitian_error() < 1e-9);
    }

    #[test]
    fn extract_diagonal_case() {
        let grid = Grid::new_2d(2, 2).unwrap();
        let t = 4;
        let mut values = Array3::<Complex64>::zeros((grid.n(), t, t));
        for vox in 0..grid.n() {
            for i in 0..t {
                values[(vox, i, i)] = Complex64::new((3 - i) as f64, 0.0);
            }
        }
        let field = GramField { grid, frames: t, values };
        let stm = extract_maps(&field, ComponentRule::Fixed(1), &ExtractConfig::default())
            .unwrap();
        for x in 0..2 {
            for y in 0..2 {
                let v: Vec<Complex64> = (0..t).map(|ti| stm.maps[(x, y, 0, 0, ti)]).collect();
                // e_4 up to unit phase
                assert!(v[3].norm() > 1.0 - 1e-9);
                assert!(v[0].norm() + v[1].norm() + v[2].norm() < 1e-9);
                assert!(stm.eigvals[(x, y, 0, 0)].abs() < 1e-9);
            }
        }
    }

    fn random_psd_field(
        grid: Grid,
        t: usize,
        l: usize,
        gap_low: f64,
        gap_high: f64,
        seed: u64,
    ) -> (GramField, Vec<DMatrix<Complex64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Array3::<Complex64>::zeros((grid.n(), t, t));
        let mut truth = Vec::new();
        for vox in 0..grid.n() {
            let mut q = linalg::complex_gaussian(t, t, 1.0, &mut rng);
            linalg::mgs_orthonormalize(&mut q);
            use rand::Rng;
            let mut d = DMatrix::<Complex64>::zeros(t, t);
            for i in 0..t {
                let lam = if i < l {
                    gap_low * rng.random::<f64>()
                } else {
                    gap_high + rng.random::<f64>()
                };
                d[(i, i)] = Complex64::new(lam, 0.0);
            }
            let g = &q * d * q.adjoint();
            for i in 0..t {
                for j in 0..t {
                    values[(vox, i, j)] = (g[(i, j)] + g[(j, i)].conj()) * Complex64::new(0.5, 0.0);
                }
            }
            truth.push(q.columns(0, l).clone_owned());
        }
        (
            GramField {
                grid,
                frames: t,
                values,
            },
            truth,
        )
    }

    #[test]
    fn orthogonal_iteration_matches_dense_eig() {
        let grid = Grid::new_2d(6, 6).unwrap();
        let t = 10;
        let l = 3;
        // eigengap 0.1 between the kept and discarded groups
        let (field, truth) = random_psd_field(grid, t, l, 0.2, 0.3, 41);
        let cfg = ExtractConfig::default();
        let stm = extract_maps(&field, ComponentRule::Fixed(l), &cfg).unwrap();
        assert!(stm.orthonormality_error() < 1e-6);
        let mut worst = 0f64;
        for (vox, q_true) in truth.iter().enumerate() {
            let [x, y, z] = grid.voxel_coords(vox);
            let q_est = stm.voxel_basis(x, y, z);
            worst = worst.max(linalg::subspace_max_angle(&q_est, q_true));
        }
        assert!(worst < 1e-6, "max subspace angle {worst}");
    }

    #[test]
    fn orthogonal_iteration_converges_without_fallback() {
        // well-separated spectrum: the shifted iteration contracts fast
        let grid = Grid::new_2d(3, 3).unwrap();
        let t = 8;
        let l = 2;
        let (field, truth) = random_psd_field(grid, t, l, 0.05, 20.0, 43);
        let cfg = ExtractConfig {
            max_iters: 60,
            ..ExtractConfig::default()
        };
        // verify per-voxel convergence directly
        let shift = super::row_sum_bound(&field) * (1.0 + 1e-9) + 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut q0 = linalg::complex_gaussian(t, l, 1.0, &mut rng);
        linalg::mgs_orthonormalize(&mut q0);
        for vox in 0..grid.n() {
            let g = field.voxel_matrix(vox);
            let vb = super::extract_voxel(&g, l, shift, &q0, &cfg).unwrap();
            assert!(!vb.fallback, "voxel {vox} fell back");
            let angle = linalg::subspace_max_angle(&vb.basis, &truth[vox]);
            assert!(angle < 1e-6, "voxel {vox} angle {angle}");
        }
    }

    fn exact_phantom_setup() -> (DynamicImage, crate::phantom::BandLayout, KtDataset) {
        let spec = MultibandSpec {
            dims: [32, 24, 1],
            frames: 20,
            j_max: 3,
            regions: 2,
            exact_mode: true,
            spatial_smoothness: 0.0,
            noise_sigma: 0.0,
            support_fraction: 1.0,
            task: None,
            exact_modulation_radius: 1,
        };
        let (img, layout) = generate_phantom_with_layout(&spec, 21).unwrap();
        let maps = SensitivityMaps::uniform(img.grid);
        let mask = SamplingMask::full(
            img.grid,
            img.frames,
            [
                AxisRange::new(0, 32),
                AxisRange::new(0, 24),
                AxisRange::new(0, 1),
            ],
        )
        .unwrap();
        let acs = simulate_acquisition(&img, &maps, &mask, 0.0, 0).unwrap();
        (img, layout, acs)
    }

    #[test]
    fn exact_phantom_maps_represent_every_voxel() {
        let (img, _layout, acs) = exact_phantom_setup();
        let support = build_support(SupportShape::Ellipsoid, 2, 2).unwrap();
        let gram = build_gram_fft(&acs, &support).unwrap();
        let proj = crate::nullspace::exact_projector(&gram, 1e-12).unwrap();
        let field = compute_gram_field(&proj, &img.grid).unwrap();
        // per-voxel nullspace dimension equals the region count
        let l = 2;
        let stm = extract_maps(&field, ComponentRule::Fixed(l), &ExtractConfig::default())
            .unwrap();
        assert!(stm.orthonormality_error() < 1e-6);
        let mut num = 0f64;
        let mut den = 0f64;
        for x in 0..32 {
            for y in 0..24 {
                let basis = stm.voxel_basis(x, y, 0);
                let rho = DMatrix::from_fn(img.frames, 1, |t, _| img.values[(x, y, 0, t)]);
                let resid = &rho - &basis * basis.ad_mul(&rho);
                num += resid.norm().powi(2);
                den += rho.norm().powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-8, "projection residual {rel}");
        // sketched projector yields equivalent maps
        let hint = proj.rank_estimate;
        let ps = sketched_projector(
            &gram,
            &SketchConfig {
                multiplier: 2.0,
                seed: 3,
                s_override: None,
            },
            1e-12,
            hint,
        )
        .unwrap();
        let field_s = compute_gram_field(&ps, &img.grid).unwrap();
        let stm_s = extract_maps(&field_s, ComponentRule::Fixed(l), &ExtractConfig::default())
            .unwrap();
        let mut num = 0f64;
        let mut den = 0f64;
        for x in 0..32 {
            for y in 0..24 {
                let basis = stm_s.voxel_basis(x, y, 0);
                let rho = DMatrix::from_fn(img.frames, 1, |t, _| img.values[(x, y, 0, t)]);
                let resid = &rho - &basis * basis.ad_mul(&rho);
                num += resid.norm().powi(2);
                den += rho.norm().powi(2);
            }
        }
        let rel_s = (num / den).sqrt();
        // near-null directions are only sketch-accurate to about their
        // own eigenvalue scale, so the bar is looser than the exact path
        assert!(rel_s < 1e-4, "sketched-path projection residual {rel_s}");
    }

    #[test]
    fn threshold_rule_reports_per_voxel_counts() {
        let (_, _, acs) = exact_phantom_setup();
        let support = build_support(SupportShape::Ellipsoid, 2, 2).unwrap();
        let gram = build_gram_fft(&acs, &support).unwrap();
        let proj = crate::nullspace::exact_projector(&gram, 1e-12).unwrap();
        let coarse = Grid::new_2d(16, 12).unwrap();
        let field = compute_gram_field(&proj, &coarse).unwrap();
        let stm = extract_maps(
            &field,
            ComponentRule::Threshold { rel: 1e-8, max: 6 },
            &ExtractConfig::default(),
        )
        .unwrap();
        let counts = stm.per_voxel_l.as_ref().unwrap();
        assert!(counts.iter().all(|&c| c >= 1 && c <= stm.components));
        assert_eq!(stm.components, 2);
    }

    #[test]
    fn interpolation_identity_and_dc() {
        let grid = Grid::new_2d(8, 6).unwrap();
        let t = 5;
        let l = 2;
        // constant-in-space orthonormal maps
        let mut basis = linalg::complex_gaussian(t, l, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        linalg::mgs_orthonormalize(&mut basis);
        let maps = Array5::from_shape_fn((8, 6, 1, l, t), |(_, _, _, j, ti)| basis[(ti, j)]);
        let stm = StmSet {
            grid,
            frames: t,
            components: l,
            maps,
            eigvals: Array4::zeros((8, 6, 1, l)),
            per_voxel_l: None,
        };
        let same = interpolate_maps(&stm, &grid).unwrap();
        let mut worst = 0f64;
        for (a, b) in same.maps.iter().zip(stm.maps.iter()) {
            worst = worst.max((a - b).norm());
        }
        assert!(worst < 1e-10, "identity interpolation changed maps by {worst}");
        // upsampling preserves constants
        let target = Grid::new_2d(16, 12).unwrap();
        let up = interpolate_maps(&stm, &target).unwrap();
        let mut worst = 0f64;
        for x in 0..16 {
            for y in 0..12 {
                for j in 0..l {
                    for ti in 0..t {
                        worst = worst.max((up.maps[(x, y, 0, j, ti)] - basis[(ti, j)]).norm());
                    }
                }
            }
        }
        assert!(worst < 1e-9, "constants not preserved: {worst}");
    }

    #[test]
    fn combine_acs_identity_for_uniform_single_coil() {
        let grid = Grid::new_2d(12, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let acs_box = [
            AxisRange::centered(12, 6),
            AxisRange::centered(10, 4),
            AxisRange::new(0, 1),
        ];
        let mut flags = Array4::<bool>::from_elem((12, 10, 1, 2), false);
        let mut samples = Array5::<Complex64>::zeros((12, 10, 1, 1, 2));
        for t in 0..2 {
            for x in acs_box[0].iter() {
                for y in acs_box[1].iter() {
                    flags[(x, y, 0, t)] = true;
                    use rand::Rng;
                    samples[(x, y, 0, 0, t)] =
                        Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                }
            }
        }
        let mask = SamplingMask::new(grid, 2, flags, acs_box).unwrap();
        let ds = KtDataset::new(grid, samples.clone(), mask).unwrap();
        let maps = SensitivityMaps::uniform(grid);
        let out = combine_acs(&ds, &maps).unwrap();
        let mut worst = 0f64;
        for ((x, y, z, _, t), v) in out.samples.indexed_iter() {
            worst = worst.max((v - samples[(x, y, z, 0, t)]).norm());
        }
        assert!(worst < 1e-10, "identity combine error {worst}");
    }

    /// Band-limited maps and object: the combine recovers the low-res
    /// k-space of rho exactly.
    #[test]
    fn combine_acs_recovers_bandlimited_object() {
        let grid = Grid::new_2d(16, 16).unwrap();
        let frames = 2;
        let q = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let make_bandlimited = |rng: &mut ChaCha8Rng| {
            let mut k = Array3::<Complex64>::zeros((16, 16, 1));
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    use rand::Rng;
                    k[(
                        (8 + dx).rem_euclid(16) as usize + 0,
                        (8 + dy).rem_euclid(16) as usize,
                        0,
                    )] = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                }
            }
            kspace_to_image(&k)
        };
        let rho: Vec<Array3<Complex64>> = (0..frames).map(|_| make_bandlimited(&mut rng)).collect();
        let mut maps_arr = Array4::<Complex64>::zeros((16, 16, 1, q));
        for c in 0..q {
            let m = make_bandlimited(&mut rng);
            for ((x, y, z), v) in m.indexed_iter() {
                maps_arr[(x, y, z, c)] = v + Complex64::new(2.0, 0.0); // bounded away from zero
            }
        }
        let maps = SensitivityMaps::new(grid, maps_arr).unwrap();
        // ACS covers the product spectrum: rho (2) + maps (2) bins -> half-width 4
        let acs_box = [
            AxisRange::centered(16, 12),
            AxisRange::centered(16, 12),
            AxisRange::new(0, 1),
        ];
        let mask = SamplingMask::full(grid, frames, acs_box).unwrap();
        let img = DynamicImage::new(
            grid,
            Array4::from_shape_fn((16, 16, 1, frames), |(x, y, z, t)| rho[t][(x, y, z)]),
        )
        .unwrap();
        let kt = simulate_acquisition(&img, &maps, &mask, 0.0, 0).unwrap();
        // restrict to ACS samples only
        let mut flags = Array4::<bool>::from_elem((16, 16, 1, frames), false);
        let mut samples = Array5::<Complex64>::zeros((16, 16, 1, q, frames));
        for t in 0..frames {
            for x in acs_box[0].iter() {
                for y in acs_box[1].iter() {
                    flags[(x, y, 0, t)] = true;
                    for c in 0..q {
                        samples[(x, y, 0, c, t)] = kt.samples[(x, y, 0, c, t)];
                    }
                }
            }
        }
        let acs_mask = SamplingMask::new(grid, frames, flags, acs_box).unwrap();
        let acs = KtDataset::new(grid, samples, acs_mask).unwrap();
        let combined = combine_acs(&acs, &maps).unwrap();
        // expected: k-space of rho restricted to the ACS box
        let mut num = 0f64;
        let mut den = 0f64;
        for t in 0..frames {
            let k_rho = image_to_kspace(&rho[t]);
            for x in 0..16 {
                for y in 0..16 {
                    let expect = if acs_box[0].contains(x) && acs_box[1].contains(y) {
                        k_rho[(x, y, 0)]
                    } else {
                        Complex64::default()
                    };
                    num += (combined.samples[(x, y, 0, 0, t)] - expect).norm_sqr();
                    den += expect.norm_sqr();
                }
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-8, "combine recovery error {rel}");
    }

    #[test]
    fn combine_acs_guards_zero_sensitivity() {
        let grid = Grid::new_2d(8, 8).unwrap();
        let acs_box = [
            AxisRange::centered(8, 4),
            AxisRange::centered(8, 4),
            AxisRange::new(0, 1),
        ];
        let mask = SamplingMask::full(grid, 1, acs_box).unwrap();
        let mut samples = Array5::<Complex64>::zeros((8, 8, 1, 2, 1));
        for x in 0..8 {
            for y in 0..8 {
                samples[(x, y, 0, 0, 0)] = Complex64::new(1.0, 0.0);
            }
        }
        let ds = KtDataset::new(grid, samples, mask).unwrap();
        // maps vanish on half the grid
        let maps_arr = Array4::from_shape_fn((8, 8, 1, 2), |(x, _, _, q)| {
            if x < 4 {
                Complex64::default()
            } else if q == 0 {
                Complex64::new(0.8, 0.0)
            } else {
                Complex64::new(0.0, 0.6)
            }
        });
        let maps = SensitivityMaps::new(grid, maps_arr).unwrap();
        let out = combine_acs(&ds, &maps).unwrap();
        assert!(out
            .samples
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn sensitivity_maps_recovered_from_bandlimited_simulation() {
        let grid = Grid::new_2d(24, 24).unwrap();
        let q = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let bandlimited = |rng: &mut ChaCha8Rng, dc: f64| {
            let mut k = Array3::<Complex64>::zeros((24, 24, 1));
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    use rand::Rng;
                    let scale = if dx == 0 && dy == 0 { dc } else { 0.25 };
                    k[(
                        (12 + dx) as usize,
                        (12 + dy) as usize,
                        0,
                    )] += Complex64::new(
                        scale * (rng.random::<f64>() - 0.5),
                        scale * (rng.random::<f64>() - 0.5),
                    );
                }
            }
            k[(12, 12, 0)] += Complex64::new(3.0, 0.0);
            kspace_to_image(&k)
        };
        let mut maps_arr = Array4::<Complex64>::zeros((24, 24, 1, q));
        for c in 0..q {
            let m = bandlimited(&mut rng, 1.0);
            for ((x, y, z), v) in m.indexed_iter() {
                maps_arr[(x, y, z, c)] = *v;
            }
        }
        let truth = SensitivityMaps::new(grid, maps_arr).unwrap();
        let rho = bandlimited(&mut rng, 1.0);
        let img = DynamicImage::new(
            grid,
            Array4::from_shape_fn((24, 24, 1, 1), |(x, y, z, _)| rho[(x, y, z)]),
        )
        .unwrap();
        let acs_box = [
            AxisRange::centered(24, 18),
            AxisRange::centered(24, 18),
            AxisRange::new(0, 1),
        ];
        let mask = SamplingMask::full(grid, 1, acs_box).unwrap();
        let kt = simulate_acquisition(&img, &truth, &mask, 0.0, 0).unwrap();
        // keep only ACS
        let mut flags = Array4::<bool>::from_elem((24, 24, 1, 1), false);
        let mut samples = Array5::<Complex64>::zeros((24, 24, 1, q, 1));
        for x in acs_box[0].iter() {
            for y in acs_box[1].iter() {
                flags[(x, y, 0, 0)] = true;
                for c in 0..q {
                    samples[(x, y, 0, c, 0)] = kt.samples[(x, y, 0, c, 0)];
                }
            }
        }
        let acs_mask = SamplingMask::new(grid, 1, flags, acs_box).unwrap();
        let acs = KtDataset::new(grid, samples, acs_mask).unwrap();
        let support = build_support(SupportShape::Ellipsoid, 3, 2).unwrap();
        let est = estimate_sensitivity_maps(&acs, &support, 1e-10).unwrap();
        // per-voxel correlation where the object has signal
        let mut worst: f64 = 1.0;
        for x in 0..24 {
            for y in 0..24 {
                if rho[(x, y, 0)].norm() < 0.1 {
                    continue;
                }
                let mut dot = Complex64::default();
                let mut na = 0f64;
                let mut nb = 0f64;
                for c in 0..q {
                    let a = est.values[(x, y, 0, c)];
                    let b = truth.values[(x, y, 0, c)];
                    dot += a.conj() * b;
                    na += a.norm_sqr();
                    nb += b.norm_sqr();
                }
                if na > 0.0 && nb > 0.0 {
                    worst = worst.min(dot.norm() / (na.sqrt() * nb.sqrt()));
                }
            }
        }
        assert!(worst > 0.99, "worst per-voxel correlation {worst}");
        // single-coil input is rejected
        let single = KtDataset::new(
            grid,
            Array5::zeros((24, 24, 1, 1, 1)),
            SamplingMask::full(grid, 1, acs_box).unwrap(),
        )
        .unwrap();
        assert!(estimate_sensitivity_maps(&single, &support, 1e-10).is_err());
    }

    #[test]
    fn stm_round_trips_through_disk() {
        let grid = Grid::new_2d(5, 4).unwrap();
        let t = 6;
        let l = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let maps = Array5::from_shape_fn((5, 4, 1, l, t), |_| {
            Complex64::new(
                (rng.random::<f32>() - 0.5) as f64,
                (rng.random::<f32>() - 0.5) as f64,
            )
        });
        let eigvals = Array4::from_shape_fn((5, 4, 1, l), |_| rng.random::<f32>() as f64);
        let stm = StmSet {
            grid,
            frames: t,
            components: l,
            maps,
            eigvals,
            per_voxel_l: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stm");
        write_stm(&path, &stm).unwrap();
        let back = read_stm(&path).unwrap();
        assert_eq!(back.components, l);
        assert_eq!(back.maps, stm.maps);
        assert_eq!(back.eigvals, stm.eigvals);
    }
}
