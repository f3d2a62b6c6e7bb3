//! Structured-low-rank regularized reconstruction: each STM/PSF spatial
//! component is a virtual channel of a convolutional matrix built from
//! the component k-spaces; a majorize-minimize loop alternates a hard
//! rank truncation with a quadratic solve by CG.

use nalgebra::DMatrix;
use ndarray::Array3;
use num_complex::Complex64;

use crate::calib::{build_support, SupportShape};
use crate::data::KtDataset;
use crate::error::{Result, StmError};
use crate::fft::{image_to_kspace, kspace_to_image};
use crate::linalg;

use super::{dot, ComponentImages, ForwardOp, ReconConfig, SolveResult, TemporalModel};

/// Convolutional matrix of the component k-spaces: row per (circular)
/// k-space position, column per (offset, component).
fn build_structured(
    khat: &[Array3<Complex64>],
    offsets: &[[i64; 3]],
    dims: [usize; 3],
) -> DMatrix<Complex64> {
    let n = dims[0] * dims[1] * dims[2];
    let cols = offsets.len() * khat.len();
    let mut s = DMatrix::<Complex64>::zeros(n, cols);
    for (l, k) in khat.iter().enumerate() {
        for (oi, off) in offsets.iter().enumerate() {
            let col = l * offsets.len() + oi;
            let mut row = 0usize;
            for x in 0..dims[0] {
                let sx = (x as i64 - off[0]).rem_euclid(dims[0] as i64) as usize;
                for y in 0..dims[1] {
                    let sy = (y as i64 - off[1]).rem_euclid(dims[1] as i64) as usize;
                    for z in 0..dims[2] {
                        let sz = (z as i64 - off[2]).rem_euclid(dims[2] as i64) as usize;
                        s[(row, col)] = k[(sx, sy, sz)];
                        row += 1;
                    }
                }
            }
        }
    }
    s
}

/// Adjoint of [`build_structured`], landing back on component k-spaces.
fn adjoint_structured(
    m: &DMatrix<Complex64>,
    offsets: &[[i64; 3]],
    components: usize,
    dims: [usize; 3],
) -> Vec<Array3<Complex64>> {
    let mut out = vec![Array3::<Complex64>::zeros((dims[0], dims[1], dims[2])); components];
    for (l, k) in out.iter_mut().enumerate() {
        for (oi, off) in offsets.iter().enumerate() {
            let col = l * offsets.len() + oi;
            let mut row = 0usize;
            for x in 0..dims[0] {
                let sx = (x as i64 - off[0]).rem_euclid(dims[0] as i64) as usize;
                for y in 0..dims[1] {
                    let sy = (y as i64 - off[1]).rem_euclid(dims[1] as i64) as usize;
                    for z in 0..dims[2] {
                        let sz = (z as i64 - off[2]).rem_euclid(dims[2] as i64) as usize;
                        k[(sx, sy, sz)] += m[(row, col)];
                        row += 1;
                    }
                }
            }
        }
    }
    out
}

fn component_kspaces(u: &ComponentImages) -> Vec<Array3<Complex64>> {
    (0..u.components)
        .map(|l| image_to_kspace(&u.component(l).to_owned()))
        .collect()
}

/// Spectrum (descending squared singular values) of the structured matrix
/// built from component images; exposed for rank inspection and tests.
pub fn structured_spectrum(u: &ComponentImages, radius: usize) -> Result<Vec<f64>> {
    let dims = u.grid.dims();
    let support = build_support(SupportShape::Ellipsoid, radius, u.grid.spatial_dim())?;
    let khat = component_kspaces(u);
    let s = build_structured(&khat, &support.offsets, dims);
    let gram = s.ad_mul(&s);
    let vals = linalg::hermitian_eigenvalues(&gram);
    Ok(vals.iter().rev().map(|v| v.max(0.0)).collect())
}

/// Majorize-minimize solver for
/// `1/2 ||A M u - d||^2 + lambda ||S(u) - rank_r(S(u))||^2`.
/// With `lambda = 0` this reduces to the unregularized CG solve.
pub fn solve_structured_lowrank(
    op: &ForwardOp,
    model: &TemporalModel,
    data: &KtDataset,
    cfg: &ReconConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        return super::solve_tikhonov(op, model, data, &ReconConfig {
            lambda: 0.0,
            ..cfg.clone()
        });
    }
    let grid = op.grid();
    let dims = grid.dims();
    let l = model.components();
    let support = build_support(SupportShape::Ellipsoid, cfg.loraks_radius, grid.spatial_dim())?;
    let cols = support.len() * l;
    let rows = grid.n();
    if cfg.loraks_rank >= cols.min(rows) {
        return Err(StmError::config(format!(
            "structured rank {} must be below the matrix minimum dimension {}",
            cfg.loraks_rank,
            cols.min(rows)
        )));
    }
    // S^H S = |support| I for the circular construction
    let lambda_eff = 2.0 * cfg.lambda * support.len() as f64;

    let b = model.adjoint_expand(&op.adjoint(data)?)?;
    // initialize from the unregularized solve
    let init = super::solve_tikhonov(op, model, data, &ReconConfig {
        lambda: 0.0,
        ..cfg.clone()
    })?;
    let mut u = init.components;
    let mut residuals = init.residuals;

    for _outer in 0..cfg.outer_iters {
        let khat = component_kspaces(&u);
        let s = build_structured(&khat, &support.offsets, dims);
        let gram = s.ad_mul(&s);
        let (vals, vecs) = linalg::hermitian_eig(&gram)?;
        let _ = vals;
        let vr = vecs.columns(cols - cfg.loraks_rank, cfg.loraks_rank).clone_owned();
        // rank-r majorizer target Z = S V_r V_r^H, pulled back through S^H
        let z = &s * (&vr * vr.adjoint());
        let khat_adj = adjoint_structured(&z, &support.offsets, l, dims);
        let mut rhs = b.clone();
        for (li, k) in khat_adj.iter().enumerate() {
            let img = kspace_to_image(k);
            for ((x, y, z3), v) in img.indexed_iter() {
                rhs.values[(x, y, z3, li)] += Complex64::new(2.0 * cfg.lambda, 0.0) * v;
            }
        }
        // inner quadratic: (M^H A^H A M + lambda_eff I) u = rhs
        let (u_new, inner_res) = cg_inner(op, model, lambda_eff, &rhs, cfg)?;
        residuals.extend(inner_res);
        let mut diff = 0f64;
        let mut norm = 0f64;
        for (a, bb) in u_new.values.iter().zip(u.values.iter()) {
            diff += (a - bb).norm_sqr();
            norm += bb.norm_sqr();
        }
        u = u_new;
        if norm > 0.0 && (diff / norm).sqrt() < cfg.tol.max(1e-12) {
            break;
        }
    }
    let image = model.expand(&u)?;
    Ok(SolveResult {
        components: u,
        image,
        residuals,
    })
}

fn cg_inner(
    op: &ForwardOp,
    model: &TemporalModel,
    lambda: f64,
    b: &ComponentImages,
    cfg: &ReconConfig,
) -> Result<(ComponentImages, Vec<f64>)> {
    let mut x = ComponentImages::zeros(b.grid, b.components);
    let b_norm = b.norm();
    let mut residuals = Vec::new();
    if b_norm == 0.0 {
        return Ok((x, residuals));
    }
    let apply = |u: &ComponentImages| -> Result<ComponentImages> {
        let img = model.expand(u)?;
        let back = op.adjoint(&op.apply(&img)?)?;
        let mut out = model.adjoint_expand(&back)?;
        for (o, v) in out.values.iter_mut().zip(u.values.iter()) {
            *o += Complex64::new(lambda, 0.0) * v;
        }
        Ok(out)
    };
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = dot(&r.values, &r.values).re;
    residuals.push(rr.sqrt() / b_norm);
    for _ in 0..cfg.max_iters {
        if rr.sqrt() <= cfg.tol * b_norm {
            break;
        }
        let ap = apply(&p)?;
        let p_ap = dot(&p.values, &ap.values).re;
        if p_ap <= 0.0 {
            return Err(StmError::numeric("inner CG lost positive definiteness"));
        }
        let alpha = Complex64::new(rr / p_ap, 0.0);
        for (xv, pv) in x.values.iter_mut().zip(p.values.iter()) {
            *xv += alpha * pv;
        }
        for (rv, av) in r.values.iter_mut().zip(ap.values.iter()) {
            *rv -= alpha * av;
        }
        let rr_new = dot(&r.values, &r.values).re;
        residuals.push(rr_new.sqrt() / b_norm);
        let beta = Complex64::new(rr_new / rr, 0.0);
        rr = rr_new;
        for (pv, rv) in p.values.iter_mut().zip(r.values.iter()) {
            *pv = rv + beta * *pv;
        }
    }
    Ok((x, residuals))
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_image;
    use super::*;
    use crate::data::SensitivityMaps;
    use crate::grid::Grid;
    use crate::phantom::{generate_mask, MaskSpec};
    use ndarray::Array4;

    #[test]
    fn lambda_zero_reduces_to_tikhonov() {
        let grid = Grid::new_2d(10, 8).unwrap();
        let frames = 4;
        let maps = SensitivityMaps::uniform(grid);
        let mask = generate_mask(
            grid,
            frames,
            &MaskSpec {
                acs: [10, 4, 1],
                extra_lines: [2, 0],
                stride: [1, 1],
            },
        )
        .unwrap();
        let op = ForwardOp::new(maps, mask).unwrap();
        let truth = random_image(grid, frames, 3);
        let data = op.apply(&truth).unwrap();
        let scale = 1.0 / (frames as f64).sqrt();
        let basis = nalgebra::DMatrix::from_fn(frames, 2, |t, j| {
            let ph = 2.0 * std::f64::consts::PI * (t * j) as f64 / frames as f64;
            Complex64::new(ph.cos(), ph.sin()) * Complex64::new(scale, 0.0)
        });
        let model = TemporalModel::Psf { frames, basis };
        let cfg = ReconConfig {
            lambda: 0.0,
            max_iters: 25,
            tol: 1e-12,
            ..ReconConfig::default()
        };
        let a = super::super::solve_tikhonov(&op, &model, &data, &cfg).unwrap();
        let b = solve_structured_lowrank(&op, &model, &data, &cfg).unwrap();
        let mut err = 0f64;
        for (x, y) in a.image.values.iter().zip(b.image.values.iter()) {
            err += (x - y).norm_sqr();
        }
        assert!(err.sqrt() < 1e-12, "lambda=0 paths differ");
    }

    #[test]
    fn compact_support_components_are_rank_deficient() {
        // components sharing a small support: the structured matrix has
        // many vanishing singular values and the penalty at the truth is
        // near zero
        let grid = Grid::new_2d(12, 12).unwrap();
        let l = 2;
        let mut values = Array4::<Complex64>::zeros((12, 12, 1, l));
        for x in 4..8 {
            for y in 4..8 {
                for j in 0..l {
                    values[(x, y, 0, j)] =
                        Complex64::new((x + j) as f64 * 0.3, (y as f64) * 0.2 - 1.0);
                }
            }
        }
        let u = ComponentImages {
            grid,
            components: l,
            values,
        };
        let spec = structured_spectrum(&u, 2).unwrap();
        let total: f64 = spec.iter().sum();
        let rank = 20;
        let tail: f64 = spec.iter().skip(rank).sum();
        // hard-thresholding at the chosen rank leaves a tiny residual
        assert!(
            tail < 1e-2 * total,
            "penalty at ground truth too large: {tail} of {total}"
        );
        let full: f64 = spec.iter().skip(spec.len() - 5).sum();
        assert!(full < 1e-10 * total, "smallest singular values not near zero");
    }

    #[test]
    fn rank_must_fit_matrix() {
        let grid = Grid::new_2d(6, 6).unwrap();
        let frames = 3;
        let maps = SensitivityMaps::uniform(grid);
        let mask = generate_mask(
            grid,
            frames,
            &MaskSpec {
                acs: [6, 2, 1],
                extra_lines: [2, 0],
                stride: [1, 1],
            },
        )
        .unwrap();
        let op = ForwardOp::new(maps, mask).unwrap();
        let scale = 1.0 / (frames as f64).sqrt();
        let basis = nalgebra::DMatrix::from_fn(frames, 1, |_, _| Complex64::new(scale, 0.0));
        let model = TemporalModel::Psf { frames, basis };
        let truth = random_image(grid, frames, 3);
        let data = op.apply(&truth).unwrap();
        let cfg = ReconConfig {
            lambda: 0.1,
            loraks_radius: 1,
            loraks_rank: 500,
            ..ReconConfig::default()
        };
        assert!(solve_structured_lowrank(&op, &model, &data, &cfg).is_err());
    }
}
