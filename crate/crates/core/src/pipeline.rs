//! End-to-end orchestration: config-driven runs that execute
//! phantom -> acquire -> calibrate -> nullspace -> maps -> recon ->
//! metrics and emit a machine-readable report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Array5};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calib::{build_gram_fft, build_support, SupportShape};
use crate::data::{DynamicImage, KtDataset, RoiMask, SamplingMask, SensitivityMaps};
use crate::error::{Result, StmError};
use crate::grid::Grid;
use crate::maps::{
    combine_acs, compute_gram_field, extract_maps, interpolate_maps, ComponentRule,
    ExtractConfig, StmSet,
};
use crate::metrics::{nrmse, npr_curve, tscore_map, TaskParadigm};
use crate::nullspace::{
    annihilation_residual_from_gram, estimate_rank_subframes, exact_projector,
    sketched_projector, NullspaceProjector, ProjectorMethod, SketchConfig,
};
use crate::phantom::{
    generate_mask, generate_phantom_with_layout, generate_sensitivities,
    simulate_acquisition, MaskSpec, MultibandSpec,
};
use crate::recon::{
    data_sharing, psf_basis_from_acs, solve_lps, solve_structured_lowrank, solve_tikhonov,
    zero_filled, ForwardOp, LpsConfig, ReconConfig, Regularizer, TemporalModel,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub shape: SupportShape,
    pub radius: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullspaceMethod {
    Exact,
    Sketch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullspaceConfig {
    pub method: NullspaceMethod,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_mu")]
    pub multiplier: f64,
    #[serde(default)]
    pub s_override: Option<usize>,
    #[serde(default = "default_rank_frames")]
    pub rank_frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// also run the exact path and record the timing ratio
    #[serde(default)]
    pub compare_exact: bool,
}

fn default_tau() -> f64 {
    1e-3
}
fn default_mu() -> f64 {
    2.0
}
fn default_rank_frames() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapsConfig {
    pub components: usize,
    #[serde(default = "default_coarse")]
    pub coarse_factor: usize,
    #[serde(default)]
    pub per_voxel_threshold: Option<f64>,
    #[serde(default = "default_extract_iters")]
    pub max_iters: usize,
}

fn default_coarse() -> usize {
    2
}
fn default_extract_iters() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ReconMethod {
    StmTikhonov {
        lambdas: Vec<f64>,
        #[serde(default = "default_cg_iters")]
        iters: usize,
    },
    StmLoraks {
        lambdas: Vec<f64>,
        rank: usize,
        #[serde(default = "default_loraks_radius")]
        radius: usize,
        #[serde(default = "default_outer")]
        outer_iters: usize,
        #[serde(default = "default_cg_iters")]
        iters: usize,
    },
    PsfTikhonov {
        l_psf: usize,
        lambdas: Vec<f64>,
        #[serde(default = "default_cg_iters")]
        iters: usize,
    },
    Lps {
        lambda_l: f64,
        lambda_s: f64,
        #[serde(default = "default_lps_iters")]
        iters: usize,
    },
    DataSharing,
    ZeroFilled,
}

fn default_cg_iters() -> usize {
    30
}
fn default_loraks_radius() -> usize {
    2
}
fn default_outer() -> usize {
    8
}
fn default_lps_iters() -> usize {
    50
}

impl ReconMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ReconMethod::StmTikhonov { .. } => "stm-tikhonov",
            ReconMethod::StmLoraks { .. } => "stm-loraks",
            ReconMethod::PsfTikhonov { .. } => "psf-tikhonov",
            ReconMethod::Lps { .. } => "lps",
            ReconMethod::DataSharing => "data-sharing",
            ReconMethod::ZeroFilled => "zero-filled",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub phantom: MultibandSpec,
    pub mask: MaskSpec,
    #[serde(default = "default_coils")]
    pub coils: usize,
    /// acquisition SNR in dB on acquired samples; omit for noise-free
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub kernel: KernelConfig,
    pub nullspace: NullspaceConfig,
    pub maps: MapsConfig,
    #[serde(default)]
    pub recon: Vec<ReconMethod>,
    /// NPR curve component counts (empty = skip)
    #[serde(default)]
    pub npr_components: Vec<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_coils() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.coils == 0 {
            return Err(StmError::config("coils must be >= 1"));
        }
        if !(self.nullspace.tau > 0.0 && self.nullspace.tau < 1.0) {
            return Err(StmError::config(format!(
                "nullspace tau must lie in (0,1), got {}",
                self.nullspace.tau
            )));
        }
        if self.kernel.radius == 0 {
            return Err(StmError::config("kernel radius must be >= 1"));
        }
        if self.maps.components == 0 || self.maps.components > self.phantom.frames {
            return Err(StmError::config("map component count out of range"));
        }
        if self.maps.coarse_factor == 0 {
            return Err(StmError::config("coarse factor must be >= 1"));
        }
        for l in &self.npr_components {
            if *l == 0 || *l > self.phantom.frames {
                return Err(StmError::config("npr component count out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankInfo {
    pub hint: usize,
    pub estimate: usize,
    pub method: NullspaceMethod,
    pub sketch_dim: Option<usize>,
    pub filter_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    /// best NRMSE over the lambda sweep
    pub nrmse: f64,
    pub best_lambda: Option<f64>,
    /// (lambda, NRMSE) sweep when applicable
    pub sweep: Vec<(f64, f64)>,
    /// t-score contrast when a task phantom was used
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tscore: Option<TscoreSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TscoreSummary {
    pub mean_inside: f64,
    pub mean_outside: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub acceleration: f64,
    pub noise_sigma: f64,
    pub rank: RankInfo,
    pub annihilation_residual: f64,
    pub npr: Vec<(usize, f64)>,
    pub methods: BTreeMap<String, MethodReport>,
    pub orderings: Vec<OrderingCheck>,
    /// sketched / exact wall-clock ratio when compare_exact was set
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nullspace_speedup: Option<f64>,
    /// stage name -> milliseconds; excluded from determinism comparisons
    pub timings_ms: Vec<(String, f64)>,
}

impl Report {
    /// Serialization with timings stripped, for byte-identical comparisons
    /// of deterministic runs.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.timings_ms.clear();
        clone.nullspace_speedup = None;
        Ok(serde_json::to_string_pretty(&clone)?)
    }
}

/// Restrict a dataset to its ACS box (single-coil path for calibration).
fn acs_only(data: &KtDataset) -> Result<KtDataset> {
    let [nx, ny, nz] = data.grid.dims();
    let b = data.mask.acs_box;
    let mut flags = Array4::<bool>::from_elem((nx, ny, nz, data.frames), false);
    let mut samples = Array5::<Complex64>::zeros((nx, ny, nz, data.coils, data.frames));
    for t in 0..data.frames {
        for x in b[0].iter() {
            for y in b[1].iter() {
                for z in b[2].iter() {
                    flags[(x, y, z, t)] = true;
                    for q in 0..data.coils {
                        samples[(x, y, z, q, t)] = data.samples[(x, y, z, q, t)];
                    }
                }
            }
        }
    }
    let mask = SamplingMask::new(data.grid, data.frames, flags, b)?;
    KtDataset::new(data.grid, samples, mask)
}

fn coarse_grid(grid: Grid, factor: usize, min_extents: [usize; 3]) -> Result<Grid> {
    let dims = grid.dims();
    let mut out = [0usize; 3];
    for ax in 0..3 {
        out[ax] = (dims[ax] / factor).max(min_extents[ax]).max(1).min(dims[ax]);
    }
    Grid::new(out)
}

struct Timer {
    timings: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: Vec::new(),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.timings
            .push((name.to_string(), t0.elapsed().as_secs_f64() * 1e3));
        Ok(out)
    }
}

/// Execute a full pipeline run. Deterministic given the config seeds.
pub fn run(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    let mut timer = Timer::new();

    // phantom and ground truth
    let (truth, layout) = timer.stage("phantom", || {
        generate_phantom_with_layout(&config.phantom, config.seed)
    })?;
    let grid = truth.grid;
    let roi = layout.support_roi();

    let sens = timer.stage("sensitivities", || {
        if config.coils > 1 {
            generate_sensitivities(grid, config.coils, config.seed.wrapping_add(1))
        } else {
            Ok(SensitivityMaps::uniform(grid))
        }
    })?;

    let mask = timer.stage("mask", || {
        generate_mask(grid, truth.frames, &config.mask)
    })?;
    let acceleration = mask.acceleration();

    // noise level from the requested SNR
    let (data, sigma) = timer.stage("acquire", || {
        let clean = simulate_acquisition(&truth, &sens, &mask, 0.0, config.seed)?;
        let sigma = match config.snr_db {
            Some(snr) => {
                let acquired: Vec<f64> = clean
                    .samples
                    .iter()
                    .filter(|v| v.norm_sqr() > 0.0)
                    .map(|v| v.norm_sqr())
                    .collect();
                let rms = (acquired.iter().sum::<f64>() / acquired.len().max(1) as f64).sqrt();
                rms * 10f64.powf(-snr / 20.0)
            }
            None => 0.0,
        };
        let data = if sigma > 0.0 {
            simulate_acquisition(&truth, &sens, &mask, sigma, config.seed.wrapping_add(2))?
        } else {
            clean
        };
        Ok((data, sigma))
    })?;

    // calibration data: virtual single coil
    let acs = timer.stage("combine-acs", || {
        if config.coils > 1 {
            combine_acs(&data, &sens)
        } else {
            acs_only(&data)
        }
    })?;

    let support = build_support(config.kernel.shape, config.kernel.radius, grid.spatial_dim())?;
    let gram = timer.stage("gram", || build_gram_fft(&acs, &support))?;

    let hint = timer.stage("rank-hint", || {
        estimate_rank_subframes(&acs, &support, config.nullspace.tau, config.nullspace.rank_frames)
    })?;

    let mut nullspace_speedup = None;
    let proj: NullspaceProjector = match config.nullspace.method {
        NullspaceMethod::Exact => timer.stage("nullspace-exact", || {
            exact_projector(&gram, config.nullspace.tau)
        })?,
        NullspaceMethod::Sketch => {
            let cfg = SketchConfig {
                multiplier: config.nullspace.multiplier,
                seed: config.nullspace.seed,
                s_override: config.nullspace.s_override,
            };
            let t0 = Instant::now();
            let p = sketched_projector(&gram, &cfg, config.nullspace.tau, hint.rank)?;
            let sketch_time = t0.elapsed().as_secs_f64();
            timer
                .timings
                .push(("nullspace-sketch".into(), sketch_time * 1e3));
            if config.nullspace.compare_exact {
                let t1 = Instant::now();
                let _exact = exact_projector(&gram, config.nullspace.tau)?;
                let exact_time = t1.elapsed().as_secs_f64();
                timer
                    .timings
                    .push(("nullspace-exact".into(), exact_time * 1e3));
                nullspace_speedup = Some(exact_time / sketch_time.max(1e-12));
            }
            p
        }
    };
    let rank_info = RankInfo {
        hint: hint.rank,
        estimate: proj.rank_estimate,
        method: config.nullspace.method,
        sketch_dim: proj.sketch_dim,
        filter_count: proj.filter_count(),
    };

    let annihilation_residual = timer.stage("annihilation", || {
        annihilation_residual_from_gram(&proj, &gram)
    })?;

    // gram field on a coarse grid, extraction, interpolation
    let margins = support.margins();
    let min_ext = [
        2 * margins[0] + 1,
        2 * margins[1] + 1,
        2 * margins[2] + 1,
    ];
    let eval_grid = coarse_grid(grid, config.maps.coarse_factor, min_ext)?;
    let field = timer.stage("gram-field", || compute_gram_field(&proj, &eval_grid))?;
    let extract_cfg = ExtractConfig {
        max_iters: config.maps.max_iters,
        seed: config.seed.wrapping_add(3),
        ..ExtractConfig::default()
    };
    let rule = match config.maps.per_voxel_threshold {
        Some(rel) => ComponentRule::Threshold {
            rel,
            max: config.maps.components,
        },
        None => ComponentRule::Fixed(config.maps.components),
    };
    let coarse_maps = timer.stage("extract-maps", || extract_maps(&field, rule, &extract_cfg))?;
    let stm: StmSet = timer.stage("interpolate-maps", || {
        if eval_grid == grid {
            Ok(coarse_maps.clone())
        } else {
            interpolate_maps(&coarse_maps, &grid)
        }
    })?;

    // NPR curve against the fully sampled truth
    let stm_model = TemporalModel::Stm(stm.clone());
    let npr = if config.npr_components.is_empty() {
        Vec::new()
    } else {
        timer.stage("npr", || {
            npr_curve(&truth, &stm_model, &roi, &config.npr_components)
        })?
    };

    // task paradigm for t-score summaries
    let paradigm = config.phantom.task.as_ref().map(|t| {
        TaskParadigm::alternating(t.block, t.cycles, config.phantom.frames)
    });
    let paradigm = match paradigm {
        Some(p) => Some(p?),
        None => None,
    };
    let task_roi = layout.task_roi();

    let tscore_of = |img: &DynamicImage| -> Result<Option<TscoreSummary>> {
        let (Some(p), Some(region)) = (&paradigm, &task_roi) else {
            return Ok(None);
        };
        let tmap = tscore_map(img, p)?;
        let mut inside = (0f64, 0usize);
        let mut outside = (0f64, 0usize);
        for ((x, y, z), v) in tmap.indexed_iter() {
            if !roi.flags[(x, y, z)] {
                continue;
            }
            if region.flags[(x, y, z)] {
                inside = (inside.0 + v, inside.1 + 1);
            } else {
                outside = (outside.0 + v, outside.1 + 1);
            }
        }
        Ok(Some(TscoreSummary {
            mean_inside: inside.0 / inside.1.max(1) as f64,
            mean_outside: outside.0 / outside.1.max(1) as f64,
        }))
    };

    // reconstructions
    let op = ForwardOp::new(sens.clone(), mask.clone())?;
    let mut methods: BTreeMap<String, MethodReport> = BTreeMap::new();
    let mut images: BTreeMap<String, DynamicImage> = BTreeMap::new();
    for method in &config.recon {
        let name = method.name().to_string();
        let report = timer.stage(&format!("recon-{name}"), || match method {
            ReconMethod::ZeroFilled => {
                let img = zero_filled(&data, if config.coils > 1 { Some(&sens) } else { None })?;
                let e = nrmse(&img, &truth, Some(&roi))?.total;
                let ts = tscore_of(&img)?;
                images.insert(name.clone(), img);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: None,
                    sweep: Vec::new(),
                    tscore: ts,
                })
            }
            ReconMethod::DataSharing => {
                let img = data_sharing(&data, if config.coils > 1 { Some(&sens) } else { None })?;
                let e = nrmse(&img, &truth, Some(&roi))?.total;
                let ts = tscore_of(&img)?;
                images.insert(name.clone(), img);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: None,
                    sweep: Vec::new(),
                    tscore: ts,
                })
            }
            ReconMethod::StmTikhonov { lambdas, iters } => {
                let mut sweep = Vec::new();
                let mut best: Option<(f64, f64, DynamicImage)> = None;
                for &lambda in lambdas {
                    let cfg = ReconConfig {
                        regularizer: Regularizer::Tikhonov,
                        lambda,
                        max_iters: *iters,
                        ..ReconConfig::default()
                    };
                    let sol = solve_tikhonov(&op, &stm_model, &data, &cfg)?;
                    let e = nrmse(&sol.image, &truth, Some(&roi))?.total;
                    sweep.push((lambda, e));
                    if best.as_ref().map_or(true, |(be, _, _)| e < *be) {
                        best = Some((e, lambda, sol.image));
                    }
                }
                let (e, lambda, img) = best.ok_or_else(|| {
                    StmError::config("stm-tikhonov needs at least one lambda")
                })?;
                let ts = tscore_of(&img)?;
                images.insert(name.clone(), img);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: Some(lambda),
                    sweep,
                    tscore: ts,
                })
            }
            ReconMethod::StmLoraks {
                lambdas,
                rank,
                radius,
                outer_iters,
                iters,
            } => {
                let mut sweep = Vec::new();
                let mut best: Option<(f64, f64, DynamicImage)> = None;
                for &lambda in lambdas {
                    let cfg = ReconConfig {
                        regularizer: Regularizer::StructuredLowrank,
                        lambda,
                        max_iters: *iters,
                        loraks_radius: *radius,
                        loraks_rank: *rank,
                        outer_iters: *outer_iters,
                        ..ReconConfig::default()
                    };
                    let sol = solve_structured_lowrank(&op, &stm_model, &data, &cfg)?;
                    let e = nrmse(&sol.image, &truth, Some(&roi))?.total;
                    sweep.push((lambda, e));
                    if best.as_ref().map_or(true, |(be, _, _)| e < *be) {
                        best = Some((e, lambda, sol.image));
                    }
                }
                let (e, lambda, img) = best.ok_or_else(|| {
                    StmError::config("stm-loraks needs at least one lambda")
                })?;
                let ts = tscore_of(&img)?;
                images.insert(name.clone(), img);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: Some(lambda),
                    sweep,
                    tscore: ts,
                })
            }
            ReconMethod::PsfTikhonov {
                l_psf,
                lambdas,
                iters,
            } => {
                let psf = psf_basis_from_acs(&acs, *l_psf)?;
                let mut sweep = Vec::new();
                let mut best: Option<(f64, f64, DynamicImage)> = None;
                for &lambda in lambdas {
                    let cfg = ReconConfig {
                        regularizer: Regularizer::Tikhonov,
                        lambda,
                        max_iters: *iters,
                        ..ReconConfig::default()
                    };
                    let sol = solve_tikhonov(&op, &psf, &data, &cfg)?;
                    let e = nrmse(&sol.image, &truth, Some(&roi))?.total;
                    sweep.push((lambda, e));
                    if best.as_ref().map_or(true, |(be, _, _)| e < *be) {
                        best = Some((e, lambda, sol.image));
                    }
                }
                let (e, lambda, img) = best.ok_or_else(|| {
                    StmError::config("psf-tikhonov needs at least one lambda")
                })?;
                let ts = tscore_of(&img)?;
                images.insert(name.clone(), img);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: Some(lambda),
                    sweep,
                    tscore: ts,
                })
            }
            ReconMethod::Lps {
                lambda_l,
                lambda_s,
                iters,
            } => {
                let cfg = LpsConfig {
                    lambda_l: *lambda_l,
                    lambda_s: *lambda_s,
                    max_iters: *iters,
                    tol: 1e-8,
                };
                let sol = solve_lps(&op, &data, &cfg)?;
                let e = nrmse(&sol.image, &truth, Some(&roi))?.total;
                let ts = tscore_of(&sol.image)?;
                images.insert(name.clone(), sol.image);
                Ok(MethodReport {
                    nrmse: e,
                    best_lambda: None,
                    sweep: Vec::new(),
                    tscore: ts,
                })
            }
        })?;
        methods.insert(name, report);
    }

    // declared ordering checks among the standard methods
    let mut orderings = Vec::new();
    let mut push_order = |name: &str, a: &str, b: &str| {
        if let (Some(ra), Some(rb)) = (methods.get(a), methods.get(b)) {
            orderings.push(OrderingCheck {
                name: name.to_string(),
                left: ra.nrmse,
                right: rb.nrmse,
                holds: ra.nrmse > rb.nrmse,
            });
        }
    };
    push_order("zero-filled > data-sharing", "zero-filled", "data-sharing");
    push_order("data-sharing > stm-tikhonov", "data-sharing", "stm-tikhonov");
    if let (Some(tik), Some(lor)) = (methods.get("stm-tikhonov"), methods.get("stm-loraks")) {
        orderings.push(OrderingCheck {
            name: "stm-loraks <= stm-tikhonov".into(),
            left: lor.nrmse,
            right: tik.nrmse,
            holds: lor.nrmse <= tik.nrmse,
        });
    }

    // optional artifact dump
    if let Some(dir) = &config.output_dir {
        timer.stage("write-artifacts", || {
            if !dir.exists() {
                std::fs::create_dir_all(dir)?;
            }
            crate::io::write_dataset(&dir.join("truth"), &crate::io::Dataset::Image(truth.clone()))?;
            crate::io::write_dataset(&dir.join("mask"), &crate::io::Dataset::Mask(mask.clone()))?;
            crate::io::write_dataset(&dir.join("data"), &crate::io::Dataset::Kt(data.clone()))?;
            if config.coils > 1 {
                crate::io::write_dataset(
                    &dir.join("sens"),
                    &crate::io::Dataset::Sensitivity(sens.clone()),
                )?;
            }
            crate::io::write_roi(&dir.join("roi"), &roi)?;
            crate::maps::write_stm(&dir.join("maps"), &stm)?;
            for (name, img) in &images {
                crate::io::write_dataset(
                    &dir.join(format!("recon-{name}")),
                    &crate::io::Dataset::Image(img.clone()),
                )?;
            }
            Ok(())
        })?;
    }

    let report = Report {
        config: config.clone(),
        acceleration,
        noise_sigma: sigma,
        rank: rank_info,
        annihilation_residual,
        npr,
        methods,
        orderings,
        nullspace_speedup,
        timings_ms: timer.timings,
    };
    if let Some(dir) = &config.output_dir {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub identical: bool,
    /// metric -> (a, b, delta)
    pub deltas: BTreeMap<String, (f64, f64, f64)>,
    pub ordering_violations: Vec<String>,
}

/// Tabulate metric deltas between two reports from the same phantom and
/// mask configuration; refuses mismatched setups.
pub fn compare(a: &Report, b: &Report) -> Result<CompareSummary> {
    let pa = serde_json::to_string(&a.config.phantom)?;
    let pb = serde_json::to_string(&b.config.phantom)?;
    let ma = serde_json::to_string(&a.config.mask)?;
    let mb = serde_json::to_string(&b.config.mask)?;
    if pa != pb || ma != mb {
        return Err(StmError::config(
            "reports come from different phantom or mask configurations",
        ));
    }
    let mut deltas = BTreeMap::new();
    for (name, ra) in &a.methods {
        if let Some(rb) = b.methods.get(name) {
            deltas.insert(
                format!("nrmse/{name}"),
                (ra.nrmse, rb.nrmse, rb.nrmse - ra.nrmse),
            );
        }
    }
    for ((la, va), (lb, vb)) in a.npr.iter().zip(b.npr.iter()) {
        if la == lb {
            deltas.insert(format!("npr/L={la}"), (*va, *vb, vb - va));
        }
    }
    let mut violations = Vec::new();
    for report in [a, b] {
        for check in &report.orderings {
            if !check.holds {
                violations.push(format!(
                    "{} ({:.4} vs {:.4})",
                    check.name, check.left, check.right
                ));
            }
        }
    }
    let identical = deltas.values().all(|(_, _, d)| *d == 0.0) && violations.is_empty();
    Ok(CompareSummary {
        identical,
        deltas,
        ordering_violations: violations,
    })
}

/// Bundled configurations mirroring the experiment shapes.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "phantom2d-A-like" => Some(include_str!("../presets/phantom2d_a_like.json")),
        "phantom2d-smoke" => Some(include_str!("../presets/phantom2d_smoke.json")),
        "phantom3d-B-like" => Some(include_str!("../presets/phantom3d_b_like.json")),
        "phantom3d-smoke" => Some(include_str!("../presets/phantom3d_smoke.json")),
        "task2d" => Some(include_str!("../presets/task2d.json")),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "phantom2d-A-like",
        "phantom2d-smoke",
        "phantom3d-B-like",
        "phantom3d-smoke",
        "task2d",
    ]
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
