//! Quantitative evaluation: normalized projection residual, ROI-aware
//! NRMSE, per-voxel eigenvalue maps, and block-design t-score maps.

use ndarray::{Array3, Array4};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, RoiMask, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::grid::AxisRange;
use crate::linalg;
use crate::maps::GramField;
use crate::recon::{solve_tikhonov, ForwardOp, ReconConfig, Regularizer, TemporalModel};

/// Normalized projection residual NPR(L) = ||rho - rho_hat(L)|| / ||rho||
/// over the ROI, where rho_hat comes from the unregularized fully sampled
/// least-squares fit of the first L model components.
pub fn npr(
    reference: &DynamicImage,
    model: &TemporalModel,
    roi: &RoiMask,
    l: usize,
) -> Result<f64> {
    if roi.grid != reference.grid {
        return Err(StmError::invariant("roi grid disagrees with reference"));
    }
    if roi.count() == 0 {
        return Err(StmError::config("empty roi"));
    }
    let truncated = model.truncate(l)?;
    let [nx, ny, nz] = reference.grid.dims();
    let maps = SensitivityMaps::uniform(reference.grid);
    let mask = SamplingMask::full(
        reference.grid,
        reference.frames,
        [
            AxisRange::new(0, nx),
            AxisRange::new(0, ny),
            AxisRange::new(0, nz),
        ],
    )?;
    let op = ForwardOp::new(maps, mask)?;
    let data = op.apply(reference)?;
    let cfg = ReconConfig {
        regularizer: Regularizer::None,
        lambda: 0.0,
        max_iters: 20,
        tol: 1e-12,
        ..ReconConfig::default()
    };
    let sol = solve_tikhonov(&op, &truncated, &data, &cfg)?;
    let mut num = 0f64;
    let mut den = 0f64;
    for ((x, y, z, t), v) in reference.values.indexed_iter() {
        if !roi.flags[(x, y, z)] {
            continue;
        }
        num += (sol.image.values[(x, y, z, t)] - v).norm_sqr();
        den += v.norm_sqr();
    }
    if den == 0.0 {
        return Err(StmError::config("reference is zero inside the roi"));
    }
    Ok((num / den).sqrt())
}

/// NPR for each component count in `l_values` using one model.
pub fn npr_curve(
    reference: &DynamicImage,
    model: &TemporalModel,
    roi: &RoiMask,
    l_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    l_values
        .iter()
        .map(|&l| npr(reference, model, roi, l).map(|v| (l, v)))
        .collect()
}

pub struct NrmseReport {
    pub total: f64,
    pub per_frame: Vec<f64>,
}

/// Relative l2 error over the ROI (or the whole grid), plus the per-frame
/// breakdown.
pub fn nrmse(
    recon: &DynamicImage,
    reference: &DynamicImage,
    roi: Option<&RoiMask>,
) -> Result<NrmseReport> {
    if recon.grid != reference.grid || recon.frames != reference.frames {
        return Err(StmError::invariant("recon and reference shapes disagree"));
    }
    if let Some(r) = roi {
        if r.grid != reference.grid {
            return Err(StmError::invariant("roi grid disagrees with reference"));
        }
        if r.count() == 0 {
            return Err(StmError::config("empty roi"));
        }
    }
    let inside = |x: usize, y: usize, z: usize| roi.map_or(true, |r| r.flags[(x, y, z)]);
    let mut num = 0f64;
    let mut den = 0f64;
    let mut per_frame = Vec::with_capacity(reference.frames);
    for t in 0..reference.frames {
        let mut nf = 0f64;
        let mut df = 0f64;
        for ((x, y, z), v) in reference.frame(t).indexed_iter() {
            if !inside(x, y, z) {
                continue;
            }
            nf += (recon.values[(x, y, z, t)] - v).norm_sqr();
            df += v.norm_sqr();
        }
        per_frame.push(if df > 0.0 { (nf / df).sqrt() } else { 0.0 });
        num += nf;
        den += df;
    }
    if den == 0.0 {
        return Err(StmError::config("reference is zero inside the roi"));
    }
    Ok(NrmseReport {
        total: (num / den).sqrt(),
        per_frame,
    })
}

/// Per voxel, normalize the Gram spectrum by its maximum and return the
/// `k` smallest values as `k` spatial images (ascending along the last
/// axis: image 0 is the smallest eigenvalue).
pub fn eigenvalue_maps(field: &GramField, k: usize) -> Result<Array4<f64>> {
    let t = field.frames;
    if k == 0 || k > t {
        return Err(StmError::config(format!("k = {k} must lie in [1, {t}]")));
    }
    let dims = field.grid.dims();
    let nvox = field.grid.n();
    let rows: Vec<Vec<f64>> = (0..nvox)
        .into_par_iter()
        .map(|vox| {
            let g = field.voxel_matrix(vox);
            let vals = linalg::hermitian_eigenvalues(&g);
            let vmax = vals.last().copied().unwrap_or(0.0).max(0.0);
            (0..k)
                .map(|j| {
                    if vmax > 0.0 {
                        (vals[j] / vmax).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Array4::<f64>::zeros((dims[0], dims[1], dims[2], k));
    for (vox, vals) in rows.into_iter().enumerate() {
        let [x, y, z] = field.grid.voxel_coords(vox);
        for (j, v) in vals.into_iter().enumerate() {
            out[(x, y, z, j)] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLabel {
    Task,
    Rest,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Block {
    /// half-open frame range
    pub start: usize,
    pub end: usize,
    pub label: BlockLabel,
}

/// Block design tiling the frame range without overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskParadigm {
    pub frames: usize,
    pub blocks: Vec<Block>,
}

impl TaskParadigm {
    /// Alternating task/rest blocks of equal length, task first.
    pub fn alternating(block: usize, cycles: usize, frames: usize) -> Result<TaskParadigm> {
        if block == 0 || cycles == 0 || 2 * block * cycles > frames {
            return Err(StmError::config("blocks do not tile the frame range"));
        }
        let mut blocks = Vec::new();
        for c in 0..2 * cycles {
            let label = if c % 2 == 0 {
                BlockLabel::Task
            } else {
                BlockLabel::Rest
            };
            blocks.push(Block {
                start: c * block,
                end: (c + 1) * block,
                label,
            });
        }
        // trailing frames, if any, extend the final rest block
        if let Some(last) = blocks.last_mut() {
            if last.end < frames && last.label == BlockLabel::Rest {
                last.end = frames;
            }
        }
        let p = TaskParadigm { frames, blocks };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut covered = 0usize;
        let mut sorted = self.blocks.clone();
        sorted.sort_by_key(|b| b.start);
        for b in &sorted {
            if b.start != covered || b.end <= b.start {
                return Err(StmError::config(
                    "blocks must tile the frame range without overlap",
                ));
            }
            covered = b.end;
        }
        if covered > self.frames {
            return Err(StmError::config("blocks exceed the frame count"));
        }
        Ok(())
    }

    /// Frame labels with the first `discard` frames of every block after a
    /// boundary dropped.
    fn frame_labels(&self, discard: usize) -> Vec<Option<BlockLabel>> {
        let mut labels = vec![None; self.frames];
        let mut sorted = self.blocks.clone();
        sorted.sort_by_key(|b| b.start);
        for (i, b) in sorted.iter().enumerate() {
            let skip = if i == 0 { 0 } else { discard };
            for t in b.start..b.end {
                if t >= b.start + skip {
                    labels[t] = Some(b.label);
                }
            }
        }
        labels
    }
}

/// Welch two-sample t statistic between task and rest frame magnitudes,
/// per voxel. Positive values mean task > rest; two transition frames per
/// block boundary are discarded; zero-variance voxels get t = 0.
pub fn tscore_map(series: &DynamicImage, paradigm: &TaskParadigm) -> Result<Array3<f64>> {
    paradigm.validate()?;
    if series.frames != paradigm.frames {
        return Err(StmError::invariant("paradigm frame count disagrees"));
    }
    let labels = paradigm.frame_labels(2);
    let task_frames: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Some(BlockLabel::Task))
        .map(|(t, _)| t)
        .collect();
    let rest_frames: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Some(BlockLabel::Rest))
        .map(|(t, _)| t)
        .collect();
    if task_frames.len() < 2 || rest_frames.len() < 2 {
        return Err(StmError::config(
            "need at least two frames per condition after discarding transitions",
        ));
    }
    let dims = series.grid.dims();
    let mut out = Array3::<f64>::zeros((dims[0], dims[1], dims[2]));
    let stats = |frames: &[usize], x: usize, y: usize, z: usize| -> (f64, f64, f64) {
        let n = frames.len() as f64;
        let vals: Vec<f64> = frames
            .iter()
            .map(|&t| series.values[(x, y, z, t)].norm())
            .collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, var, n)
    };
    for ((x, y, z), o) in out.indexed_iter_mut() {
        let (m_task, v_task, n_task) = stats(&task_frames, x, y, z);
        let (m_rest, v_rest, n_rest) = stats(&rest_frames, x, y, z);
        let denom = (v_task / n_task + v_rest / n_rest).sqrt();
        *o = if denom > 0.0 {
            (m_task - m_rest) / denom
        } else {
            0.0
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::maps::GramField;
    use nalgebra::DMatrix;
    use ndarray::Array3 as NdArray3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn psf_model(frames: usize, l: usize) -> TemporalModel {
        let scale = 1.0 / (frames as f64).sqrt();
        let basis = DMatrix::from_fn(frames, l, |t, j| {
            let ph = 2.0 * std::f64::consts::PI * (t * j) as f64 / frames as f64;
            Complex64::new(ph.cos(), ph.sin()) * Complex64::new(scale, 0.0)
        });
        TemporalModel::Psf { frames, basis }
    }

    #[test]
    fn npr_zero_for_full_basis_and_monotone() {
        let grid = Grid::new_2d(6, 5).unwrap();
        let frames = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = DynamicImage::new(
            grid,
            Array4::from_shape_fn((6, 5, 1, frames), |_| {
                Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            }),
        )
        .unwrap();
        let model = psf_model(frames, frames);
        let roi = RoiMask::full(grid);
        let full = npr(&img, &model, &roi, frames).unwrap();
        assert!(full < 1e-8, "full basis NPR {full}");
        let curve = npr_curve(&img, &model, &roi, &[1, 2, 3, 4, 5, 6]).unwrap();
        for w in curve.windows(2) {
            assert!(
                w[1].1 <= w[0].1 + 1e-10,
                "NPR not monotone: {:?}",
                curve
            );
        }
    }

    #[test]
    fn nrmse_basic_identities() {
        let grid = Grid::new_2d(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = DynamicImage::new(
            grid,
            Array4::from_shape_fn((4, 4, 1, 3), |_| {
                Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            }),
        )
        .unwrap();
        assert!(nrmse(&img, &img, None).unwrap().total < 1e-15);
        let zero = DynamicImage::zeros(grid, 3);
        assert!((nrmse(&zero, &img, None).unwrap().total - 1.0).abs() < 1e-12);
        let mut double = img.clone();
        for v in double.values.iter_mut() {
            *v *= Complex64::new(2.0, 0.0);
        }
        assert!((nrmse(&double, &img, None).unwrap().total - 1.0).abs() < 1e-12);
        // global phase invariance
        let phase = Complex64::from_polar(1.0, 1.2);
        let mut rot_a = img.clone();
        let mut rot_b = img.clone();
        for v in rot_a.values.iter_mut() {
            *v *= phase;
        }
        for v in rot_b.values.iter_mut() {
            *v *= phase;
        }
        let direct = nrmse(&double, &img, None).unwrap().total;
        let mut double_rot = double.clone();
        for v in double_rot.values.iter_mut() {
            *v *= phase;
        }
        let rotated = nrmse(&double_rot, &rot_a, None).unwrap().total;
        assert!((direct - rotated).abs() < 1e-12);
        let _ = rot_b;
    }

    #[test]
    fn eigenvalue_maps_identity_field() {
        let grid = Grid::new_2d(3, 3).unwrap();
        let t = 6;
        let mut values = NdArray3::<Complex64>::zeros((grid.n(), t, t));
        for vox in 0..grid.n() {
            for i in 0..t {
                values[(vox, i, i)] = Complex64::new(1.0, 0.0);
            }
        }
        let field = GramField {
            grid,
            frames: t,
            values,
        };
        let maps = eigenvalue_maps(&field, 4).unwrap();
        assert!(maps.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(eigenvalue_maps(&field, 0).is_err());
        assert!(eigenvalue_maps(&field, 7).is_err());
    }

    #[test]
    fn tscore_null_and_strong_activation() {
        let grid = Grid::new_2d(10, 10).unwrap();
        // 5 cycles of 20-frame blocks, plus noise
        let frames = 200;
        let paradigm = TaskParadigm::alternating(20, 5, frames).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut values = Array4::<Complex64>::zeros((10, 10, 1, frames));
        let mut task_on = vec![false; frames];
        for b in &paradigm.blocks {
            if b.label == BlockLabel::Task {
                for t in b.start..b.end {
                    task_on[t] = true;
                }
            }
        }
        for x in 0..10 {
            for y in 0..10 {
                for t in 0..frames {
                    let base = 10.0
                        + if x == 5 && y == 5 && task_on[t] { 10.0 } else { 0.0 };
                    let noise: f64 = rng.random::<f64>() - 0.5;
                    values[(x, y, 0, t)] = Complex64::new(base + noise, 0.0);
                }
            }
        }
        let img = DynamicImage::new(grid, values).unwrap();
        let tmap = tscore_map(&img, &paradigm).unwrap();
        assert!(tmap[(5, 5, 0)] > 10.0, "activated voxel t = {}", tmap[(5, 5, 0)]);
        // null voxels small on average
        let mut acc = 0f64;
        let mut n = 0usize;
        for ((x, y, _z), v) in tmap.indexed_iter() {
            if (x, y) != (5, 5) {
                acc += v.abs();
                n += 1;
            }
        }
        assert!(acc / (n as f64) < 1.5, "null voxels inflated: {}", acc / n as f64);
        // all-zero series -> t = 0 by convention
        let zero = DynamicImage::zeros(grid, frames);
        let tz = tscore_map(&zero, &paradigm).unwrap();
        assert!(tz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tscore_white_noise_is_small() {
        let grid = Grid::new_2d(4, 4).unwrap();
        let frames = 1000;
        let paradigm = TaskParadigm::alternating(20, 25, frames).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let values = Array4::from_shape_fn((4, 4, 1, frames), |_| {
            Complex64::new(5.0 + rng.random::<f64>() - 0.5, 0.0)
        });
        let img = DynamicImage::new(grid, values).unwrap();
        let tmap = tscore_map(&img, &paradigm).unwrap();
        // the null t statistic has unit variance per voxel; the mean over
        // voxels concentrates near zero
        let mean: f64 = tmap.iter().sum::<f64>() / tmap.len() as f64;
        assert!(mean.abs() < 0.5, "white-noise mean t-score {mean}");
        for v in tmap.iter() {
            assert!(v.abs() < 5.0, "white-noise t-score outlier {v}");
        }
    }

    #[test]
    fn paradigm_validation() {
        assert!(TaskParadigm::alternating(0, 3, 10).is_err());
        assert!(TaskParadigm::alternating(20, 5, 100).is_err());
        let bad = TaskParadigm {
            frames: 10,
            blocks: vec![
                Block {
                    start: 0,
                    end: 6,
                    label: BlockLabel::Task,
                },
                Block {
                    start: 5,
                    end: 10,
                    label: BlockLabel::Rest,
                },
            ],
        };
        assert!(bad.validate().is_err());
    }
}
