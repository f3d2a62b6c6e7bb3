//! Synthetic ground truth: spatially varying multiband phantoms, coil
//! sensitivities, shifted-line undersampling masks, and the forward
//! acquisition simulator.
//!
//! Two phantom constructions are provided.
//!
//! * `exact_mode = true` builds region amplitude fields as products of
//!   sine-product selector polynomials (vanishing exactly on the lattice
//!   sites of every other region) and low-degree modulations. Frequencies
//!   sit on the length-T DFT grid and the total spatial spectrum is
//!   compactly supported with a `2 Rad` margin inside the ACS, so
//!   annihilating filters with a small kernel support exist exactly and
//!   calibration residuals reach machine precision.
//! * `exact_mode = false` builds smooth Gaussian-blob regions with noise,
//!   an elliptical object support, and an optional block-design task
//!   component; annihilation is approximate, which is the realistic
//!   regime for the reconstruction experiments.

use ndarray::{Array1, Array3, Array4, Array5};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KtDataset, RoiMask, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::fft::image_to_kspace;
use crate::grid::{AxisRange, Grid};

/// Block-design task component added on top of the multiband content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    /// frames per block (one block = task or rest)
    pub block: usize,
    /// number of task/rest cycles; total frames must be >= 2*block*cycles
    pub cycles: usize,
    pub amplitude: f64,
    /// transition frames smoothed at each block edge
    #[serde(default = "default_transition")]
    pub transition: usize,
}

fn default_transition() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultibandSpec {
    pub dims: [usize; 3],
    pub frames: usize,
    pub j_max: usize,
    #[serde(default = "default_regions")]
    pub regions: usize,
    #[serde(default)]
    pub exact_mode: bool,
    /// Gaussian low-pass scale (voxels) for smooth-mode parameter fields.
    #[serde(default = "default_smoothness")]
    pub spatial_smoothness: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// fraction of the FOV covered by the elliptical object support
    /// (smooth mode only; exact mode uses the whole FOV).
    #[serde(default = "default_support")]
    pub support_fraction: f64,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// exact mode: k-space ball radius of the per-band modulation fields.
    /// Keeping this within the calibration kernel radius guarantees exact
    /// annihilating filter pairs, which makes each voxel's nullspace
    /// dimension equal to the region count.
    #[serde(default = "default_mod_radius")]
    pub exact_modulation_radius: usize,
}

fn default_mod_radius() -> usize {
    1
}

fn default_regions() -> usize {
    4
}
fn default_smoothness() -> f64 {
    4.0
}
fn default_support() -> f64 {
    0.8
}

impl MultibandSpec {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims)?;
        if self.j_max == 0 {
            return Err(StmError::config("j_max must be >= 1"));
        }
        if self.frames < 2 * self.j_max {
            return Err(StmError::config(format!(
                "frames = {} too small to resolve j_max = {} components (need >= {})",
                self.frames,
                self.j_max,
                2 * self.j_max
            )));
        }
        if self.regions == 0 {
            return Err(StmError::config("regions must be >= 1"));
        }
        if self.noise_sigma < 0.0 {
            return Err(StmError::config("noise sigma must be nonnegative"));
        }
        if let Some(task) = &self.task {
            if 2 * task.block * task.cycles > self.frames {
                return Err(StmError::config(
                    "task blocks do not fit in the frame count",
                ));
            }
        }
        Ok(())
    }
}

/// Realized per-voxel band structure of a phantom.
#[derive(Debug, Clone)]
pub struct BandLayout {
    pub grid: Grid,
    pub frames: usize,
    pub j_max: usize,
    /// per-voxel band count J(x)
    pub band_count: Array3<usize>,
    /// per-voxel band frequencies in [-1/2, 1/2); only the first J(x)
    /// entries along the last axis are meaningful
    pub freq: Array4<f64>,
    /// per-voxel complex band amplitudes (amplitude and phase combined)
    pub amp: Array4<Complex64>,
    pub support: Array3<bool>,
    pub task_region: Option<Array3<bool>>,
    pub task_course: Option<Vec<f64>>,
    /// distinct frequencies used anywhere (for oracle checks)
    pub global_freqs: Vec<f64>,
}

impl BandLayout {
    pub fn support_roi(&self) -> RoiMask {
        RoiMask {
            grid: self.grid,
            flags: self.support.clone(),
        }
    }

    pub fn task_roi(&self) -> Option<RoiMask> {
        self.task_region.as_ref().map(|r| RoiMask {
            grid: self.grid,
            flags: r.clone(),
        })
    }

    /// Noise-free evaluation of one voxel's time course.
    pub fn voxel_course(&self, x: usize, y: usize, z: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.frames];
        for j in 0..self.band_count[(x, y, z)] {
            let f = self.freq[(x, y, z, j)];
            let a = self.amp[(x, y, z, j)];
            for (t, o) in out.iter_mut().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * f * t as f64;
                *o += a * Complex64::new(ph.cos(), ph.sin());
            }
        }
        if let (Some(region), Some(course)) = (&self.task_region, &self.task_course) {
            if region[(x, y, z)] {
                for (t, o) in out.iter_mut().enumerate() {
                    *o += Complex64::new(course[t], 0.0);
                }
            }
        }
        out
    }
}

fn bin_to_freq(bin: i64, t: usize) -> f64 {
    bin as f64 / t as f64
}

/// Deterministic per-purpose RNG streams derived from one seed.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_NOISE_BASE: u64 = 1 << 32;

/// Selector polynomial: vanishes exactly on every lattice site outside
/// `keep`, spectrum limited to `(n - keep.len()) / 2` bins. The factor
/// count must be even so the product is n-periodic.
fn stripe_selector(n: usize, keep: &AxisRange) -> Result<Vec<f64>> {
    let zeros: Vec<usize> = (0..n).filter(|x| !keep.contains(*x)).collect();
    if zeros.len() % 2 != 0 {
        return Err(StmError::config(
            "exact-mode stripe widths must leave an even number of zero sites",
        ));
    }
    let mut vals = vec![1.0f64; n];
    for (x, v) in vals.iter_mut().enumerate() {
        for &xj in &zeros {
            *v *= (std::f64::consts::PI * (x as f64 - xj as f64) / n as f64).sin();
        }
    }
    let peak = vals
        .iter()
        .enumerate()
        .filter(|(x, _)| keep.contains(*x))
        .map(|(_, v)| v.abs())
        .fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Err(StmError::numeric("degenerate stripe selector"));
    }
    for v in vals.iter_mut() {
        *v /= peak;
    }
    Ok(vals)
}

/// Low-degree complex modulation 1 + eps * (harmonics inside a small
/// k-space ball), bounded away from zero.
fn low_order_modulation(
    dims: [usize; 3],
    ball_radius: usize,
    rng: &mut impl Rng,
) -> Array3<Complex64> {
    let r = ball_radius as i64;
    let mut coeff = Vec::new();
    for kx in -r..=r {
        for ky in -r..=r {
            let kz_range = if dims[2] > 1 { -r..=r } else { 0..=0 };
            for kz in kz_range {
                if kx == 0 && ky == 0 && kz == 0 {
                    continue;
                }
                if kx * kx + ky * ky + kz * kz > r * r {
                    continue;
                }
                let g = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                coeff.push(([kx, ky, kz], g));
            }
        }
    }
    let norm: f64 = coeff.iter().map(|(_, g)| g.norm()).sum::<f64>().max(1e-9);
    let scale = 0.35 / norm;
    Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, z)| {
        let mut v = Complex64::new(1.0, 0.0);
        for ([kx, ky, kz], g) in &coeff {
            let ph = 2.0
                * std::f64::consts::PI
                * (*kx as f64 * x as f64 / dims[0] as f64
                    + *ky as f64 * y as f64 / dims[1] as f64
                    + *kz as f64 * z as f64 / dims[2] as f64);
            v += g * scale * Complex64::new(ph.cos(), ph.sin());
        }
        v
    })
}

/// Draw `count` distinct DFT bins, avoiding bins already in `used` and
/// keeping a one-bin separation in off-grid mode.
fn draw_bins(
    count: usize,
    frames: usize,
    used: &mut Vec<i64>,
    rng: &mut impl Rng,
) -> Result<Vec<i64>> {
    let half = frames as i64 / 2;
    let mut pool: Vec<i64> = (-half + 1..half).filter(|b| !used.contains(b)).collect();
    if pool.len() < count {
        return Err(StmError::config(
            "not enough distinct DFT bins for the requested band structure",
        ));
    }
    pool.shuffle(rng);
    let picked: Vec<i64> = pool.into_iter().take(count).collect();
    used.extend_from_slice(&picked);
    Ok(picked)
}

fn exact_layout(spec: &MultibandSpec, seed: u64) -> Result<BandLayout> {
    let grid = Grid::new(spec.dims)?;
    let [nx, ny, nz] = spec.dims;
    let t = spec.frames;
    let p = spec.regions;
    if nx / p < 2 {
        return Err(StmError::config("too many regions for the grid extent"));
    }
    if spec.exact_modulation_radius == 0 {
        return Err(StmError::config("exact_modulation_radius must be >= 1"));
    }
    let mut rng = stream(seed, STREAM_LAYOUT);

    // equal stripes along x
    let mut stripes = Vec::with_capacity(p);
    for r in 0..p {
        let start = r * nx / p;
        let end = (r + 1) * nx / p;
        stripes.push(AxisRange::new(start, end));
    }

    let mut used_bins: Vec<i64> = Vec::new();
    let mut band_count = Array3::<usize>::zeros((nx, ny, nz));
    let mut freq = Array4::<f64>::zeros((nx, ny, nz, spec.j_max));
    let mut amp = Array4::<Complex64>::zeros((nx, ny, nz, spec.j_max));

    for (r, stripe) in stripes.iter().enumerate() {
        let j_r = spec.j_max - (r % spec.j_max);
        let bins = draw_bins(j_r, t, &mut used_bins, &mut rng)?;
        let selector = stripe_selector(nx, stripe)?;
        for (jj, bin) in bins.iter().enumerate() {
            let modulation =
                low_order_modulation(spec.dims, spec.exact_modulation_radius, &mut rng);
            let f = bin_to_freq(*bin, t);
            for x in stripe.iter() {
                for y in 0..ny {
                    for z in 0..nz {
                        freq[(x, y, z, jj)] = f;
                        amp[(x, y, z, jj)] =
                            modulation[(x, y, z)] * selector[x];
                    }
                }
            }
        }
        for x in stripe.iter() {
            for y in 0..ny {
                for z in 0..nz {
                    band_count[(x, y, z)] = j_r;
                }
            }
        }
    }

    let global_freqs = used_bins.iter().map(|&b| bin_to_freq(b, t)).collect();
    Ok(BandLayout {
        grid,
        frames: t,
        j_max: spec.j_max,
        band_count,
        freq,
        amp,
        support: Array3::from_elem((nx, ny, nz), true),
        task_region: None,
        task_course: None,
        global_freqs,
    })
}

/// Separable Gaussian low-pass with circular boundary.
fn gaussian_lowpass(field: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return field.clone();
    }
    let half = (4.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();
    let mut cur = field.clone();
    let dims = field.dim();
    let sizes = [dims.0, dims.1, dims.2];
    for axis in 0..3 {
        let n = sizes[axis] as i64;
        if n == 1 {
            continue;
        }
        let mut next = Array3::<f64>::zeros(dims);
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as i64 - half;
                        let idx = match axis {
                            0 => (((x as i64 + off).rem_euclid(n)) as usize, y, z),
                            1 => (x, ((y as i64 + off).rem_euclid(n)) as usize, z),
                            _ => (x, y, ((z as i64 + off).rem_euclid(n)) as usize),
                        };
                        acc += kv * cur[idx];
                    }
                    next[(x, y, z)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

fn smooth_task_course(task: &TaskSpec, frames: usize) -> Vec<f64> {
    let mut course = vec![0.0f64; frames];
    for (t, c) in course.iter_mut().enumerate() {
        let block_idx = t / task.block;
        if block_idx < 2 * task.cycles && block_idx % 2 == 0 {
            *c = 1.0;
        }
    }
    // raised-cosine smoothing across block edges
    if task.transition > 0 {
        let w = 2 * task.transition + 1;
        let win: Vec<f64> = (0..w)
            .map(|i| {
                let u = (i as f64 + 0.5) / w as f64;
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * u).cos()
            })
            .collect();
        let wsum: f64 = win.iter().sum();
        let mut sm = vec![0.0f64; frames];
        for (t, s) in sm.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, wv) in win.iter().enumerate() {
                let src = t as i64 + i as i64 - task.transition as i64;
                let src = src.clamp(0, frames as i64 - 1) as usize;
                acc += wv * course[src];
            }
            *s = acc / wsum;
        }
        course = sm;
    }
    for c in course.iter_mut() {
        *c *= task.amplitude;
    }
    course
}

fn smooth_layout(spec: &MultibandSpec, seed: u64) -> Result<BandLayout> {
    let grid = Grid::new(spec.dims)?;
    let [nx, ny, nz] = spec.dims;
    let t = spec.frames;
    let mut rng = stream(seed, STREAM_LAYOUT);

    // elliptical object support
    let radii = [
        spec.support_fraction * nx as f64 / 2.0,
        spec.support_fraction * ny as f64 / 2.0,
        if nz > 1 {
            spec.support_fraction * nz as f64 / 2.0
        } else {
            1.0
        },
    ];
    let center = [nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0];
    let inside = |x: usize, y: usize, z: usize| -> bool {
        let dx = (x as f64 + 0.5 - center[0]) / radii[0];
        let dy = (y as f64 + 0.5 - center[1]) / radii[1];
        let dz = if nz > 1 {
            (z as f64 + 0.5 - center[2]) / radii[2]
        } else {
            0.0
        };
        dx * dx + dy * dy + dz * dz <= 1.0
    };
    let support = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| inside(x, y, z));
    if support.iter().filter(|&&s| s).count() == 0 {
        return Err(StmError::config("empty phantom support"));
    }

    // region centers inside the support, nearest-center assignment
    let supported: Vec<[usize; 3]> = support
        .indexed_iter()
        .filter(|(_, &s)| s)
        .map(|((x, y, z), _)| [x, y, z])
        .collect();
    let centers: Vec<[usize; 3]> = (0..spec.regions)
        .map(|_| supported[rng.random_range(0..supported.len())])
        .collect();
    let torus_d2 = |a: [usize; 3], b: [usize; 3]| -> f64 {
        let mut acc = 0.0;
        for ax in 0..3 {
            let n = [nx, ny, nz][ax];
            let d = (a[ax] as f64 - b[ax] as f64).abs();
            let d = d.min(n as f64 - d);
            acc += d * d;
        }
        acc
    };

    // smoothed region membership fields
    let mut member = Vec::with_capacity(spec.regions);
    for r in 0..spec.regions {
        let ind = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            if !support[(x, y, z)] {
                return 0.0;
            }
            let mine = torus_d2([x, y, z], centers[r]);
            let best = centers
                .iter()
                .map(|c| torus_d2([x, y, z], *c))
                .fold(f64::INFINITY, f64::min);
            if mine <= best { 1.0 } else { 0.0 }
        });
        member.push(gaussian_lowpass(&ind, spec.spatial_smoothness));
    }

    // per-region band sets; DC is shared as every region's first band
    let mut used_bins: Vec<i64> = vec![0];
    let mut region_bins: Vec<Vec<(f64, f64, f64)>> = Vec::new(); // (freq, base amp, base phase)
    for r in 0..spec.regions {
        let extra = spec.j_max - 1 - (r % spec.j_max.max(1)).min(spec.j_max - 1);
        let bins = draw_bins(extra, t, &mut used_bins, &mut rng)?;
        let mut bands = vec![(0.0, 1.0, 0.0)];
        for b in bins {
            let f = if spec.exact_mode {
                bin_to_freq(b, t)
            } else {
                // off-grid: jitter within half a bin, retry on collisions
                let mut attempt = 0;
                loop {
                    let jitter: f64 = (rng.random::<f64>() - 0.5) * 0.6;
                    let cand = bin_to_freq(b, t) + jitter / t as f64;
                    let min_sep = 0.5 / t as f64;
                    let collides = region_bins
                        .iter()
                        .flatten()
                        .chain(bands.iter())
                        .any(|(f0, _, _)| (f0 - cand).abs() < min_sep);
                    if !collides {
                        break cand;
                    }
                    attempt += 1;
                    if attempt > 20 {
                        log::warn!("frequency jitter failed to separate; keeping grid bin");
                        break bin_to_freq(b, t);
                    }
                }
            };
            let a = 0.4 + 0.6 * rng.random::<f64>();
            let ph = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            bands.push((f, a, ph));
        }
        region_bins.push(bands);
    }

    // smooth amplitude texture shared by all bands
    let noise_field = Array3::from_shape_fn((nx, ny, nz), |_| rng.random::<f64>() - 0.5);
    let texture = gaussian_lowpass(&noise_field, spec.spatial_smoothness);
    let tex_max = texture.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);

    let j_cap = spec.j_max + 1; // DC plus up to j_max - 1 extras, plus slack for overlaps
    let mut band_count = Array3::<usize>::zeros((nx, ny, nz));
    let mut freq = Array4::<f64>::zeros((nx, ny, nz, j_cap * spec.regions.min(4)));
    let mut amp = Array4::<Complex64>::zeros(freq.dim());
    let weight_floor = 1e-3;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !support[(x, y, z)] {
                    continue;
                }
                let tex = 1.0 + 0.25 * texture[(x, y, z)] / tex_max;
                // accumulate bands from all regions with meaningful weight,
                // merging the shared DC band
                let mut dc = Complex64::default();
                let mut slots: Vec<(f64, Complex64)> = Vec::new();
                for (r, bands) in region_bins.iter().enumerate() {
                    let w = member[r][(x, y, z)];
                    if w < weight_floor {
                        continue;
                    }
                    for (idx, (f, a, ph)) in bands.iter().enumerate() {
                        let v = Complex64::from_polar(w * a * tex, *ph);
                        if idx == 0 {
                            dc += v;
                        } else {
                            slots.push((*f, v));
                        }
                    }
                }
                let mut all = vec![(0.0, dc)];
                all.extend(slots);
                let n_bands = all.len().min(freq.dim().3);
                band_count[(x, y, z)] = n_bands;
                for (j, (f, a)) in all.into_iter().take(n_bands).enumerate() {
                    freq[(x, y, z, j)] = f;
                    amp[(x, y, z, j)] = a;
                }
            }
        }
    }

    // optional task component in a blob around the first region center
    let (task_region, task_course) = if let Some(task) = &spec.task {
        let c = centers[0];
        let rad = 0.15 * nx.min(ny) as f64;
        let region = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            support[(x, y, z)] && torus_d2([x, y, z], c) <= rad * rad
        });
        (Some(region), Some(smooth_task_course(task, t)))
    } else {
        (None, None)
    };

    let global_freqs = region_bins
        .iter()
        .flatten()
        .map(|(f, _, _)| *f)
        .collect();
    Ok(BandLayout {
        grid,
        frames: t,
        j_max: spec.j_max,
        band_count,
        freq,
        amp,
        support,
        task_region,
        task_course,
        global_freqs,
    })
}

/// Realize the per-voxel band structure for a spec.
pub fn realize_layout(spec: &MultibandSpec, seed: u64) -> Result<BandLayout> {
    spec.validate()?;
    if spec.exact_mode {
        if spec.task.is_some() {
            return Err(StmError::config(
                "task components are only supported in smooth mode",
            ));
        }
        exact_layout(spec, seed)
    } else {
        smooth_layout(spec, seed)
    }
}

/// Evaluate a layout into an image series and add complex Gaussian noise.
pub fn evaluate_layout(layout: &BandLayout, noise_sigma: f64, seed: u64) -> Result<DynamicImage> {
    let [nx, ny, nz] = layout.grid.dims();
    let t = layout.frames;
    let mut values = Array4::<Complex64>::zeros((nx, ny, nz, t));
    let n_vox = layout.grid.n();
    // voxel-parallel evaluation with per-voxel RNG streams
    let rows: Vec<(usize, Vec<Complex64>)> = (0..n_vox)
        .into_par_iter()
        .map(|vox| {
            let [x, y, z] = layout.grid.voxel_coords(vox);
            let mut course = layout.voxel_course(x, y, z);
            if noise_sigma > 0.0 {
                let mut rng = stream(seed, STREAM_NOISE_BASE + vox as u64);
                let comp = noise_sigma / 2f64.sqrt();
                for c in course.iter_mut() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *c += Complex64::new(re * comp, im * comp);
                }
            }
            (vox, course)
        })
        .collect();
    for (vox, course) in rows {
        let [x, y, z] = layout.grid.voxel_coords(vox);
        for (ti, v) in course.into_iter().enumerate() {
            values[(x, y, z, ti)] = v;
        }
    }
    DynamicImage::new(layout.grid, values)
}

/// Generate a phantom image series; deterministic given the seed.
pub fn generate_phantom(spec: &MultibandSpec, seed: u64) -> Result<DynamicImage> {
    let layout = realize_layout(spec, seed)?;
    evaluate_layout(&layout, spec.noise_sigma, seed)
}

/// Like [`generate_phantom`] but also returns the realized layout.
pub fn generate_phantom_with_layout(
    spec: &MultibandSpec,
    seed: u64,
) -> Result<(DynamicImage, BandLayout)> {
    let layout = realize_layout(spec, seed)?;
    let img = evaluate_layout(&layout, spec.noise_sigma, seed)?;
    Ok((img, layout))
}

/// Shifted-line Cartesian undersampling pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    /// ACS extent per axis; the readout axis ( x ) is always fully sampled,
    /// so acs[0] is normally the full extent.
    pub acs: [usize; 3],
    /// extra phase-encode lines per frame along (k_y, k_z)
    pub extra_lines: [usize; 2],
    /// per-frame line shift stride along (k_y, k_z)
    #[serde(default = "default_stride")]
    pub stride: [usize; 2],
}

fn default_stride() -> [usize; 2] {
    [1, 1]
}

/// Per-frame line positions on one phase-encode axis: `lines` evenly
/// spaced positions within the complement of the ACS range, cycling with
/// the frame index so every complement position recurs with period
/// `complement / lines`.
fn line_positions(
    n: usize,
    acs: &AxisRange,
    lines: usize,
    stride: usize,
    frame: usize,
) -> Result<Vec<usize>> {
    if lines == 0 {
        return Ok(Vec::new());
    }
    let complement: Vec<usize> = (0..n).filter(|i| !acs.contains(*i)).collect();
    if complement.is_empty() {
        return Err(StmError::config("no room for extra lines outside the acs"));
    }
    if complement.len() % lines != 0 {
        return Err(StmError::config(format!(
            "{} extra lines do not evenly divide the {}-sample complement",
            lines,
            complement.len()
        )));
    }
    let period = complement.len() / lines;
    let shift = (frame * stride) % period;
    Ok(complement
        .iter()
        .enumerate()
        .filter(|(idx, _)| idx % period == shift)
        .map(|(_, &pos)| pos)
        .collect())
}

/// Build the retrospective undersampling mask: full readout axis, a
/// centered ACS box in every frame, and shifted extra PE lines.
pub fn generate_mask(grid: Grid, frames: usize, spec: &MaskSpec) -> Result<SamplingMask> {
    let [nx, ny, nz] = grid.dims();
    if frames == 0 {
        return Err(StmError::config("mask needs at least one frame"));
    }
    for (ax, (&acs, &n)) in spec.acs.iter().zip(grid.dims().iter()).enumerate() {
        if acs == 0 || acs > n {
            return Err(StmError::config(format!(
                "acs extent {acs} invalid for axis {ax} of extent {n}"
            )));
        }
    }
    let acs_box = [
        AxisRange::centered(nx, spec.acs[0]),
        AxisRange::centered(ny, spec.acs[1]),
        AxisRange::centered(nz, spec.acs[2]),
    ];
    let mut flags = Array4::<bool>::from_elem((nx, ny, nz, frames), false);
    for t in 0..frames {
        // ACS box
        for x in acs_box[0].iter() {
            for y in acs_box[1].iter() {
                for z in acs_box[2].iter() {
                    flags[(x, y, z, t)] = true;
                }
            }
        }
        // extra k_y lines span all (k_x, k_z)
        for y in line_positions(ny, &acs_box[1], spec.extra_lines[0], spec.stride[0], t)? {
            for x in 0..nx {
                for z in 0..nz {
                    flags[(x, y, z, t)] = true;
                }
            }
        }
        // extra k_z lines span all (k_x, k_y)
        if nz > 1 {
            for z in line_positions(nz, &acs_box[2], spec.extra_lines[1], spec.stride[1], t)? {
                for x in 0..nx {
                    for y in 0..ny {
                        flags[(x, y, z, t)] = true;
                    }
                }
            }
        } else if spec.extra_lines[1] > 0 {
            return Err(StmError::config("k_z lines requested on a 2-D grid"));
        }
    }
    SamplingMask::new(grid, frames, flags, acs_box)
}

/// Smooth complex coil profiles, sum-of-squares normalized per voxel.
pub fn generate_sensitivities(grid: Grid, coils: usize, seed: u64) -> Result<SensitivityMaps> {
    if coils == 0 {
        return Err(StmError::config("need at least one coil"));
    }
    let [nx, ny, nz] = grid.dims();
    let mut rng = stream(seed, 2);
    let mut values = Array4::<Complex64>::zeros((nx, ny, nz, coils));
    let two_pi = 2.0 * std::f64::consts::PI;
    let width = 0.7 * nx.max(ny) as f64;
    for q in 0..coils {
        let ang = two_pi * q as f64 / coils as f64 + 0.3 * rng.random::<f64>();
        let cx = nx as f64 / 2.0 + 0.55 * nx as f64 / 2.0 * ang.cos();
        let cy = ny as f64 / 2.0 + 0.55 * ny as f64 / 2.0 * ang.sin();
        let cz = if nz > 1 {
            nz as f64 * (0.25 + 0.5 * ((q % 2) as f64) + 0.1 * rng.random::<f64>())
        } else {
            0.5
        };
        let phase0 = two_pi * rng.random::<f64>();
        let ramp = [
            (rng.random::<f64>() - 0.5) * 2.0,
            (rng.random::<f64>() - 0.5) * 2.0,
            if nz > 1 { (rng.random::<f64>() - 0.5) * 2.0 } else { 0.0 },
        ];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let d2 = (x as f64 - cx).powi(2)
                        + (y as f64 - cy).powi(2)
                        + if nz > 1 { (z as f64 - cz).powi(2) } else { 0.0 };
                    let mag = (-d2 / (2.0 * width * width)).exp();
                    let ph = phase0
                        + two_pi
                            * (ramp[0] * x as f64 / nx as f64
                                + ramp[1] * y as f64 / ny as f64
                                + ramp[2] * z as f64 / nz as f64);
                    values[(x, y, z, q)] = Complex64::from_polar(mag, ph);
                }
            }
        }
    }
    // per-voxel sum-of-squares normalization
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let sos: f64 = (0..coils).map(|q| values[(x, y, z, q)].norm_sqr()).sum();
                let inv = 1.0 / sos.sqrt();
                for q in 0..coils {
                    values[(x, y, z, q)] *= inv;
                }
            }
        }
    }
    SensitivityMaps::new(grid, values)
}

/// Forward acquisition: per frame and coil, unitary spatial DFT of
/// c_q(x) rho(x,t), masked, plus complex Gaussian noise on acquired
/// samples only.
pub fn simulate_acquisition(
    img: &DynamicImage,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<KtDataset> {
    if img.grid != maps.grid || img.grid != mask.grid || img.frames != mask.frames {
        return Err(StmError::invariant(
            "image, maps and mask geometry disagree",
        ));
    }
    let [nx, ny, nz] = img.grid.dims();
    let q = maps.coils;
    let t = img.frames;
    let volumes: Vec<((usize, usize), Array3<Complex64>)> = (0..q * t)
        .into_par_iter()
        .map(|idx| {
            let coil = idx / t;
            let frame = idx % t;
            let weighted = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
                maps.values[(x, y, z, coil)] * img.values[(x, y, z, frame)]
            });
            let mut k = image_to_kspace(&weighted);
            let mut rng = stream(seed, 3 << 32 | idx as u64);
            let comp = noise_sigma / 2f64.sqrt();
            for ((x, y, z), v) in k.indexed_iter_mut() {
                if mask.flags[(x, y, z, frame)] {
                    if noise_sigma > 0.0 {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        let im: f64 = StandardNormal.sample(&mut rng);
                        *v += Complex64::new(re * comp, im * comp);
                    }
                } else {
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
    KtDataset::new(img.grid, samples, mask.clone())
}

/// Per-voxel temporal DFT magnitudes, used by layout sanity checks.
pub fn temporal_spectrum(course: &[Complex64]) -> Array1<f64> {
    let t = course.len();
    let mut out = Array1::<f64>::zeros(t);
    for (bin, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::default();
        for (ti, c) in course.iter().enumerate() {
            let ph = -2.0 * std::f64::consts::PI * bin as f64 * ti as f64 / t as f64;
            acc += c * Complex64::new(ph.cos(), ph.sin());
        }
        *o = acc.norm_sqr();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_2d(exact: bool) -> MultibandSpec {
        MultibandSpec {
            dims: [32, 24, 1],
            frames: 24,
            j_max: 3,
            regions: 2,
            exact_mode: exact,
            spatial_smoothness: 3.0,
            noise_sigma: 0.0,
            support_fraction: 0.8,
            task: None,
            exact_modulation_radius: 1,
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = spec_2d(false);
        let a = generate_phantom(&spec, 42).unwrap();
        let b = generate_phantom(&spec, 42).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_phantom(&spec, 43).unwrap();
        assert!(a.values != c.values);
    }

    #[test]
    fn static_phantom_has_casorati_rank_one() {
        let mut spec = spec_2d(true);
        spec.j_max = 1;
        spec.regions = 1;
        spec.frames = 8;
        let mut layout = realize_layout(&spec, 1).unwrap();
        layout.freq.fill(0.0); // single DC band everywhere
        let img = evaluate_layout(&layout, 0.0, 1).unwrap();
        for t in 1..8 {
            let d: f64 = img
                .frame(t)
                .iter()
                .zip(img.frame(0).iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            assert!(d < 1e-24, "frame {t} differs from frame 0");
        }
        let cas = img.casorati();
        let m = nalgebra::DMatrix::from_fn(8, 8, |i, j| {
            let mut acc = Complex64::default();
            for v in 0..cas.nrows() {
                acc += cas[(v, i)].conj() * cas[(v, j)];
            }
            acc
        });
        let vals = crate::linalg::hermitian_eigenvalues(&m);
        let max = vals.last().copied().unwrap();
        let second = vals[vals.len() - 2];
        assert!(second < 1e-12 * max, "second eigenvalue {second} vs {max}");
    }

    #[test]
    fn disjoint_half_fov_frequencies_rank_two() {
        // two stripes, one distinct frequency each
        let spec = MultibandSpec {
            dims: [16, 8, 1],
            frames: 12,
            j_max: 1,
            regions: 2,
            exact_mode: true,
            spatial_smoothness: 0.0,
            noise_sigma: 0.0,
            support_fraction: 1.0,
            task: None,
            exact_modulation_radius: 1,
        };
        let (img, layout) = generate_phantom_with_layout(&spec, 5).unwrap();
        // per-voxel rank 1: each voxel's course is proportional to one atom
        for x in [0usize, 8] {
            let course = layout.voxel_course(x + 2, 3, 0);
            let spec_t = temporal_spectrum(&course);
            let total: f64 = spec_t.iter().sum();
            let peak = spec_t.iter().fold(0.0f64, |m, &v| m.max(v));
            if total > 1e-12 {
                assert!(peak / total > 0.999, "energy not on a single bin");
            }
        }
        // global Casorati rank 2
        let cas = img.casorati();
        let t = img.frames;
        let gram = nalgebra::DMatrix::from_fn(t, t, |i, j| {
            let mut acc = Complex64::default();
            for v in 0..cas.nrows() {
                acc += cas[(v, i)].conj() * cas[(v, j)];
            }
            acc
        });
        let vals = crate::linalg::hermitian_eigenvalues(&gram);
        let max = vals.last().copied().unwrap();
        assert!(vals[t - 2] > 1e-6 * max, "rank should be at least 2");
        assert!(vals[t - 3] < 1e-12 * max, "rank should be at most 2");
    }

    #[test]
    fn exact_mode_energy_on_dft_bins() {
        let spec = spec_2d(true);
        let (_, layout) = generate_phantom_with_layout(&spec, 9).unwrap();
        let t = spec.frames as f64;
        for (x, y) in [(3usize, 5usize), (20, 10), (30, 1)] {
            let course = layout.voxel_course(x, y, 0);
            let sp = temporal_spectrum(&course);
            let total: f64 = sp.iter().sum();
            if total < 1e-12 {
                continue;
            }
            let mut on_bins = 0.0;
            for j in 0..layout.band_count[(x, y, 0)] {
                let f = layout.freq[(x, y, 0, j)];
                let bin = ((f * t).round() as i64).rem_euclid(spec.frames as i64) as usize;
                on_bins += sp[bin];
            }
            assert!(on_bins / total > 0.99, "energy off the declared bins");
        }
    }

    #[test]
    fn exact_mode_bands_vanish_on_foreign_stripes() {
        let spec = spec_2d(true);
        let (_, layout) = generate_phantom_with_layout(&spec, 9).unwrap();
        // stripe 0 covers x in [0, 16); stripe 1 x in [16, 32)
        assert_eq!(layout.band_count[(2, 3, 0)], 3);
        assert_eq!(layout.band_count[(20, 3, 0)], 2);
        // frequencies differ across stripes
        let f0 = layout.freq[(2, 3, 0, 0)];
        let f1 = layout.freq[(20, 3, 0, 0)];
        assert!((f0 - f1).abs() > 1e-9);
    }

    #[test]
    fn mask_acceleration_a_like() {
        let grid = Grid::new_2d(128, 84).unwrap();
        let spec = MaskSpec {
            acs: [128, 12, 1],
            extra_lines: [4, 0],
            stride: [1, 1],
        };
        let mask = generate_mask(grid, 36, &spec).unwrap();
        for t in 0..36 {
            assert_eq!(mask.samples_in_frame(t), 128 * 12 + 4 * 128);
        }
        assert!((mask.acceleration() - 5.25).abs() < 1e-12);
        // every location sampled within the 18-frame period
        let mut always_missing = 0;
        for y in 0..84 {
            let mut seen = false;
            for t in 0..18 {
                if mask.flags[(0, y, 0, t)] {
                    seen = true;
                }
            }
            if !seen {
                always_missing += 1;
            }
        }
        assert_eq!(always_missing, 0);
    }

    #[test]
    fn mask_full_acs_r_is_one() {
        let grid = Grid::new_2d(16, 16).unwrap();
        let spec = MaskSpec {
            acs: [16, 16, 1],
            extra_lines: [0, 0],
            stride: [1, 1],
        };
        let mask = generate_mask(grid, 3, &spec).unwrap();
        assert!((mask.acceleration() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_small_case_counts() {
        let grid = Grid::new_2d(16, 16).unwrap();
        let spec = MaskSpec {
            acs: [16, 4, 1],
            extra_lines: [2, 0],
            stride: [1, 1],
        };
        let mask = generate_mask(grid, 4, &spec).unwrap();
        assert_eq!(mask.samples_in_frame(0), 96);
        assert!((mask.acceleration() - 256.0 / 96.0).abs() < 1e-12);
    }

    #[test]
    fn mask_rejects_oversized_acs() {
        let grid = Grid::new_2d(8, 8).unwrap();
        let spec = MaskSpec {
            acs: [8, 12, 1],
            extra_lines: [0, 0],
            stride: [1, 1],
        };
        assert!(generate_mask(grid, 2, &spec).is_err());
    }

    #[test]
    fn sensitivities_sum_of_squares_one() {
        let grid = Grid::new_2d(12, 10).unwrap();
        let maps = generate_sensitivities(grid, 4, 3).unwrap();
        for x in 0..12 {
            for y in 0..10 {
                let sos: f64 = (0..4).map(|q| maps.values[(x, y, 0, q)].norm_sqr()).sum();
                assert!((sos - 1.0).abs() < 1e-12);
            }
        }
        let single = generate_sensitivities(grid, 1, 3).unwrap();
        for v in single.values.iter() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn acquisition_round_trip_and_parseval() {
        let spec = spec_2d(false);
        let img = generate_phantom(&spec, 11).unwrap();
        let grid = img.grid;
        let maps = SensitivityMaps::uniform(grid);
        let full = SamplingMask::full(
            grid,
            img.frames,
            [
                AxisRange::new(0, 32),
                AxisRange::new(0, 24),
                AxisRange::new(0, 1),
            ],
        )
        .unwrap();
        let kt = simulate_acquisition(&img, &maps, &full, 0.0, 0).unwrap();
        // inverse DFT recovers the image
        let mut err = 0f64;
        let mut norm = 0f64;
        for t in 0..img.frames {
            let vol = kt.volume(0, t).to_owned();
            let rec = crate::fft::kspace_to_image(&vol);
            for ((x, y, z), v) in rec.indexed_iter() {
                err += (v - img.values[(x, y, z, t)]).norm_sqr();
                norm += img.values[(x, y, z, t)].norm_sqr();
            }
        }
        assert!(err.sqrt() < 1e-10 * norm.sqrt());
        // Parseval
        let ek: f64 = kt.samples.iter().map(|v| v.norm_sqr()).sum();
        let ei: f64 = img.values.iter().map(|v| v.norm_sqr()).sum();
        assert!((ek - ei).abs() < 1e-8 * ei);
    }

    #[test]
    fn acquisition_zero_off_mask() {
        let spec = spec_2d(false);
        let img = generate_phantom(&spec, 11).unwrap();
        let mask = generate_mask(
            img.grid,
            img.frames,
            &MaskSpec {
                acs: [32, 6, 1],
                extra_lines: [2, 0],
                stride: [1, 1],
            },
        )
        .unwrap();
        let maps = SensitivityMaps::uniform(img.grid);
        let kt = simulate_acquisition(&img, &maps, &mask, 0.05, 7).unwrap();
        for ((x, y, z, _q, t), v) in kt.samples.indexed_iter() {
            if !mask.flags[(x, y, z, t)] {
                assert_eq!(*v, Complex64::default());
            }
        }
    }
}
