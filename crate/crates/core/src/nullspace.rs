//! Nullspace projector W = N N^H of the calibration matrix, either by
//! full Hermitian eigendecomposition of C^H C or by the sketched SVD
//! shortcut: W = I - V V^H needs only the leading right singular
//! subspace, which survives a random projection Y = Phi C^H C.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{build_gram_fft, build_gram_volumes, CalibGram, KernelSupport, SupportShape};
use crate::data::KtDataset;
use crate::error::{Result, StmError};
use crate::linalg;

const ZERO_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorMethod {
    Exact,
    Sketched,
}

/// Orthogonal projector onto the annihilating-filter subspace, plus the
/// rank metadata the downstream stages need.
#[derive(Debug, Clone)]
pub struct NullspaceProjector {
    pub w: DMatrix<Complex64>,
    /// estimated rank of C (dimension of the non-null subspace)
    pub rank_estimate: usize,
    pub method: ProjectorMethod,
    pub tau: f64,
    pub sketch_dim: Option<usize>,
    pub support: KernelSupport,
    pub frames: usize,
    /// spectrum used for the rank decision, descending. Eigenvalues of
    /// the Gram for the exact method, singular values of the sketch for
    /// the sketched one.
    pub spectrum: Vec<f64>,
}

impl NullspaceProjector {
    pub fn n(&self) -> usize {
        self.support.len() * self.frames
    }

    /// Number of annihilating filters R = |support| T - r_C.
    pub fn filter_count(&self) -> usize {
        self.n() - self.rank_estimate
    }

    /// ||W^2 - W||_F / ||W||_F; near zero for an orthogonal projector.
    pub fn idempotency_error(&self) -> f64 {
        let w2 = linalg::par_matmul(&self.w, &self.w);
        let norm = self.w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (w2 - &self.w).norm() / norm
    }
}

#[derive(Debug, Clone)]
pub struct RankEstimate {
    pub rank: usize,
    /// spectrum sorted descending
    pub spectrum: Vec<f64>,
}

fn rank_from_spectrum(spectrum: &[f64], tau_rel: f64) -> usize {
    let max = spectrum.first().copied().unwrap_or(0.0);
    if max <= ZERO_FLOOR {
        return 0;
    }
    spectrum.iter().filter(|&&v| v >= tau_rel * max).count()
}

fn check_tau(tau_rel: f64) -> Result<()> {
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(StmError::config(format!(
            "relative threshold tau must lie in (0,1), got {tau_rel}"
        )));
    }
    Ok(())
}

/// Count of eigenvalues >= tau_rel * lambda_max, plus the full sorted
/// spectrum for curve inspection.
pub fn estimate_rank(gram: &CalibGram, tau_rel: f64) -> Result<RankEstimate> {
    check_tau(tau_rel)?;
    let mut spectrum = linalg::hermitian_eigenvalues(&gram.matrix);
    spectrum.reverse();
    for v in spectrum.iter_mut() {
        *v = v.max(0.0);
    }
    let rank = rank_from_spectrum(&spectrum, tau_rel);
    Ok(RankEstimate { rank, spectrum })
}

/// Rank heuristic on a reduced number of frames, so the eigendecomposition
/// stays small; used to pick the sketch dimension.
pub fn estimate_rank_subframes(
    acs: &KtDataset,
    support: &KernelSupport,
    tau_rel: f64,
    sub_frames: usize,
) -> Result<RankEstimate> {
    let frames = sub_frames.clamp(1, acs.frames);
    let vols: Vec<_> = (0..frames).map(|t| acs.acs_volume(0, t)).collect();
    let views: Vec<_> = vols.iter().map(|v| v.view()).collect();
    let gram = build_gram_volumes(&views, support)?;
    estimate_rank(&gram, tau_rel)
}

/// Exact projector from the full eigendecomposition of the Gram.
pub fn exact_projector(gram: &CalibGram, tau_rel: f64) -> Result<NullspaceProjector> {
    check_tau(tau_rel)?;
    let n = gram.n();
    let (vals, vecs) = linalg::hermitian_eig(&gram.matrix)?;
    let mut spectrum: Vec<f64> = vals.iter().rev().map(|v| v.max(0.0)).collect();
    let max = spectrum.first().copied().unwrap_or(0.0);
    let rank = rank_from_spectrum(&spectrum, tau_rel);
    for v in spectrum.iter_mut() {
        *v = v.max(0.0);
    }
    let w = if max <= ZERO_FLOOR || rank == 0 {
        DMatrix::identity(n, n)
    } else {
        // leading eigenvectors live in the last `rank` ascending columns
        let v = vecs.columns(n - rank, rank).clone_owned();
        let vvh = linalg::par_matmul(&v, &v.adjoint());
        DMatrix::identity(n, n) - vvh
    };
    Ok(NullspaceProjector {
        w,
        rank_estimate: rank,
        method: ProjectorMethod::Exact,
        tau: tau_rel,
        sketch_dim: None,
        support: gram.support.clone(),
        frames: gram.frames,
        spectrum,
    })
}

/// Sketched-SVD configuration: `s = multiplier * rank_hint` unless an
/// explicit dimension is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SketchConfig {
    #[serde(default = "default_multiplier")]
    pub multiplier: f64,
    pub seed: u64,
    #[serde(default)]
    pub s_override: Option<usize>,
}

fn default_multiplier() -> f64 {
    2.0
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_override.is_none() && !(2.0..=6.0).contains(&self.multiplier) {
            return Err(StmError::config(format!(
                "sketch multiplier {} outside [2, 6] (set an explicit dimension to override)",
                self.multiplier
            )));
        }
        Ok(())
    }
}

/// Approximate projector from a sketched SVD of the Gram: draw a complex
/// Gaussian sketch, Y = Phi * gram, take the top right singular vectors
/// of Y at the spectral cut, W = I - V V^H. Reports the refined rank read
/// off Y's singular values.
pub fn sketched_projector(
    gram: &CalibGram,
    cfg: &SketchConfig,
    tau_rel: f64,
    rank_hint: usize,
) -> Result<NullspaceProjector> {
    check_tau(tau_rel)?;
    cfg.validate()?;
    let n = gram.n();
    let s = match cfg.s_override {
        Some(s) => s,
        None => ((cfg.multiplier * rank_hint.max(1) as f64).ceil() as usize).max(2),
    };
    if s <= rank_hint {
        return Err(StmError::config(format!(
            "sketch dimension {s} must exceed the rank estimate {rank_hint}"
        )));
    }
    if s > n {
        return Err(StmError::config(format!(
            "sketch dimension {s} exceeds the matrix size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phi = linalg::complex_gaussian(s, n, 1.0 / s as f64, &mut rng);
    let y = linalg::par_matmul(&phi, &gram.matrix);
    // singular values of Y from the small Gram Y Y^H
    let yyh = &y * y.adjoint();
    let yvals = linalg::hermitian_eigenvalues(&yyh);
    let spectrum: Vec<f64> = yvals.iter().rev().map(|v| v.max(0.0).sqrt()).collect();
    let rank = rank_from_spectrum(&spectrum, tau_rel);
    let w = if rank == 0 {
        DMatrix::identity(n, n)
    } else {
        let (_, v) = linalg::top_right_singular(&y, rank)?;
        let vvh = linalg::par_matmul(&v, &v.adjoint());
        DMatrix::identity(n, n) - vvh
    };
    Ok(NullspaceProjector {
        w,
        rank_estimate: rank,
        method: ProjectorMethod::Sketched,
        tau: tau_rel,
        sketch_dim: Some(s),
        support: gram.support.clone(),
        frames: gram.frames,
        spectrum,
    })
}

/// Normalized annihilation residual ||C N||_F / (||C||_F sqrt(R)),
/// evaluated as trace(W C^H C) without materializing N. Returns 0 when
/// no filters were selected or the data is empty.
pub fn filter_annihilation_residual(proj: &NullspaceProjector, acs: &KtDataset) -> Result<f64> {
    if acs.frames != proj.frames {
        return Err(StmError::invariant(
            "projector and dataset frame counts disagree",
        ));
    }
    let gram = build_gram_fft(acs, &proj.support)?;
    annihilation_residual_from_gram(proj, &gram)
}

pub fn annihilation_residual_from_gram(
    proj: &NullspaceProjector,
    gram: &CalibGram,
) -> Result<f64> {
    let n = proj.n();
    if gram.n() != n {
        return Err(StmError::invariant("projector and gram sizes disagree"));
    }
    let r = proj.filter_count();
    if r == 0 {
        return Ok(0.0);
    }
    let mut trace_wg = 0f64;
    let mut trace_g = 0f64;
    for i in 0..n {
        trace_g += gram.matrix[(i, i)].re;
        for j in 0..n {
            trace_wg += (proj.w[(i, j)] * gram.matrix[(j, i)]).re;
        }
    }
    if trace_g <= 0.0 {
        return Ok(0.0);
    }
    Ok((trace_wg.max(0.0) / (trace_g * r as f64)).sqrt())
}

#[derive(Serialize, Deserialize)]
struct ProjectorHeader {
    version: u32,
    n: usize,
    frames: usize,
    rank: usize,
    method: ProjectorMethod,
    tau: f64,
    sketch_dim: Option<usize>,
    support_shape: SupportShape,
    support_radius: usize,
    support_dim: usize,
    spectrum: Vec<f64>,
}

/// Persist a projector as `projector.json` plus a full-precision binary
/// blob (row-major, interleaved re/im f64).
pub fn write_projector(dir: &Path, proj: &NullspaceProjector) -> Result<()> {
    if !dir.exists() {
        std::fs::create_dir(dir)?;
    }
    let header = ProjectorHeader {
        version: 1,
        n: proj.n(),
        frames: proj.frames,
        rank: proj.rank_estimate,
        method: proj.method,
        tau: proj.tau,
        sketch_dim: proj.sketch_dim,
        support_shape: proj.support.shape,
        support_radius: proj.support.radius,
        support_dim: proj.support.dim,
        spectrum: proj.spectrum.clone(),
    };
    std::fs::write(
        dir.join("projector.json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("w.bin"))?);
    let n = proj.n();
    for i in 0..n {
        for j in 0..n {
            let v = proj.w[(i, j)];
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_projector(dir: &Path) -> Result<NullspaceProjector> {
    let text = std::fs::read_to_string(dir.join("projector.json"))?;
    let header: ProjectorHeader = serde_json::from_str(&text)?;
    if header.version != 1 {
        return Err(StmError::format("unsupported projector version"));
    }
    let support = crate::calib::build_support(
        header.support_shape,
        header.support_radius,
        header.support_dim,
    )?;
    let n = header.n;
    if support.len() * header.frames != n {
        return Err(StmError::format("projector header is inconsistent"));
    }
    let blob = dir.join("w.bin");
    let expected = (n * n * 16) as u64;
    let actual = std::fs::metadata(&blob)?.len();
    if actual != expected {
        return Err(StmError::format(format!(
            "projector blob has {actual} bytes, expected {expected}"
        )));
    }
    let mut r = std::io::BufReader::new(std::fs::File::open(blob)?);
    let mut w = DMatrix::<Complex64>::zeros(n, n);
    let mut buf = [0u8; 16];
    for i in 0..n {
        for j in 0..n {
            r.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf[0..8].try_into().unwrap());
            let im = f64::from_le_bytes(buf[8..16].try_into().unwrap());
            w[(i, j)] = Complex64::new(re, im);
        }
    }
    Ok(NullspaceProjector {
        w,
        rank_estimate: header.rank,
        method: header.method,
        tau: header.tau,
        sketch_dim: header.sketch_dim,
        support,
        frames: header.frames,
        spectrum: header.spectrum,
    })
}
