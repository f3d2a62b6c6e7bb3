//! Tikhonov-regularized model-based reconstruction by conjugate gradient
//! on the normal equations (M^H A^H A M + lambda I) u = M^H A^H d.

use num_complex::Complex64;

use crate::data::KtDataset;
use crate::error::{Result, StmError};

use super::{dot, ComponentImages, ForwardOp, ReconConfig, SolveResult, TemporalModel};

fn normal_apply(
    op: &ForwardOp,
    model: &TemporalModel,
    lambda: f64,
    u: &ComponentImages,
) -> Result<ComponentImages> {
    let img = model.expand(u)?;
    let data = op.apply(&img)?;
    let back = op.adjoint(&data)?;
    let mut out = model.adjoint_expand(&back)?;
    if lambda > 0.0 {
        for (o, v) in out.values.iter_mut().zip(u.values.iter()) {
            *o += Complex64::new(lambda, 0.0) * v;
        }
    }
    Ok(out)
}

/// CG on the normal equations. Returns component images, the expanded
/// series, and the per-iteration relative residual norms (non-increasing
/// for a healthy PSD system).
pub fn solve_tikhonov(
    op: &ForwardOp,
    model: &TemporalModel,
    data: &KtDataset,
    cfg: &ReconConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    if data.frames != op.frames() || data.grid != op.grid() {
        return Err(StmError::invariant("data geometry disagrees with operator"));
    }
    let grid = op.grid();
    let l = model.components();
    // b = M^H A^H d
    let b = model.adjoint_expand(&op.adjoint(data)?)?;
    let b_norm = b.norm();
    let mut x = ComponentImages::zeros(grid, l);
    let mut residuals = Vec::with_capacity(cfg.max_iters);
    if b_norm == 0.0 {
        let image = model.expand(&x)?;
        return Ok(SolveResult {
            components: x,
            image,
            residuals,
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = dot(&r.values, &r.values).re;
    residuals.push(rr.sqrt() / b_norm);
    for _ in 0..cfg.max_iters {
        if rr.sqrt() <= cfg.tol * b_norm {
            break;
        }
        let ap = normal_apply(op, model, cfg.lambda, &p)?;
        let p_ap = dot(&p.values, &ap.values).re;
        if p_ap <= 0.0 {
            return Err(StmError::numeric(
                "CG curvature is not positive; the system is not PSD (adjoint bug?)",
            ));
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
    let image = model.expand(&x)?;
    Ok(SolveResult {
        components: x,
        image,
        residuals,
    })
}
