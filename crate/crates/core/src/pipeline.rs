//! End-to-end run: phantom, basis, masks, acquisition, reconstruction, fit.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};

use crate::config::{FitKind, MaskOrdering, PipelineConfig, SolverKind};
use crate::encoding::{Encoder, SamplingMasks, SensitivityMaps};
use crate::error::{Error, Result};
use crate::io;
use crate::phantom::{make_phantom, ring_coil_maps, simulate_acquisition, Phantom};
use crate::qmap::{fit_map, Dictionary, FitBounds, FitMaps, FitMethod};
use crate::recon::{back_project, cg_solve, fista_solve, nrmse, ReconResult, Regularizer};
use crate::sampling::{assign_echoes, draw_mask, draw_per_echo_masks, EchoOrdering};
use crate::spin_sim::{SequenceParams, TissueParams, C64};
use crate::subspace::{build_ensemble, compute_basis, projection_error, sample_prior, ErrorMetric, SubspaceBasis};

#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    pub region: u32,
    /// Labeled voxels in the region.
    pub voxels: usize,
    /// Voxels whose fit failed; excluded from the statistics.
    pub failed: usize,
    pub t2_true: f64,
    pub t2_mean: f64,
    pub t2_std: f64,
}

impl RegionStats {
    pub fn bias(&self) -> f64 {
        self.t2_mean - self.t2_true
    }

    pub fn relative_error(&self) -> f64 {
        (self.t2_mean - self.t2_true).abs() / self.t2_true
    }
}

/// Everything a run produced, kept in memory as well as written out.
#[derive(Clone, Debug)]
pub struct PipelineOutputs {
    pub phantom: Phantom,
    pub sequence: SequenceParams,
    pub basis: SubspaceBasis,
    pub masks: SamplingMasks,
    pub kspace: ndarray::Array1<C64>,
    pub truth: Array3<C64>,
    pub recon: ReconResult,
    pub echoes: Array3<C64>,
    pub maps: FitMaps,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub regions: Vec<RegionStats>,
    /// Back-projected echo images against the noiseless contrast images.
    pub image_nrmse: f64,
    /// Training-ensemble Frobenius residual of the basis.
    pub basis_error: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub failed_voxels: usize,
    /// Wall time; not written to disk so reruns stay bit-identical.
    pub elapsed: Duration,
    /// Wall time per stage, in run order.
    pub timings: Vec<(&'static str, Duration)>,
    pub outputs: PipelineOutputs,
}

impl PipelineReport {
    pub fn worst_region_error(&self) -> f64 {
        self.regions.iter().map(|r| r.relative_error()).fold(0.0, f64::max)
    }
}

struct Clock {
    last: Instant,
    laps: Vec<(&'static str, Duration)>,
}

impl Clock {
    fn stage<T>(&mut self, name: &'static str, r: Result<T>) -> Result<T> {
        let now = Instant::now();
        self.laps.push((name, now - self.last));
        self.last = now;
        r.map_err(|e| e.in_stage(name))
    }
}

/// Builds the training ensemble and its truncated basis.
pub fn build_basis(cfg: &PipelineConfig, seq: &SequenceParams) -> Result<(SubspaceBasis, f64)> {
    let tissues = sample_prior(&cfg.prior, cfg.ensemble_size)?;
    let ens = build_ensemble(&tissues, seq)?;
    let basis = compute_basis(&ens, cfg.rank)?;
    let err = projection_error(&ens, &basis, ErrorMetric::FrobeniusRelative)?;
    Ok((basis, err))
}

/// Per-echo sampling masks as configured.
pub fn build_masks(cfg: &PipelineConfig) -> Result<SamplingMasks> {
    let dims = cfg.phantom.dims;
    let t = cfg.sequence.n_echoes;
    let s = &cfg.sampling;
    match s.ordering {
        MaskOrdering::PerEcho => draw_per_echo_masks(&s.profile, dims, t, s.seed),
        MaskOrdering::CenterOut => assign_echoes(&draw_mask(&s.profile, dims, s.seed)?, t, EchoOrdering::CenterOut, s.seed),
        MaskOrdering::Randomized => assign_echoes(&draw_mask(&s.profile, dims, s.seed)?, t, EchoOrdering::Randomized, s.seed),
    }
}

pub fn build_coils(cfg: &PipelineConfig) -> Result<SensitivityMaps> {
    let (nx, ny) = cfg.phantom.dims;
    if cfg.coils == 1 {
        Ok(SensitivityMaps::uniform(nx, ny))
    } else {
        ring_coil_maps(cfg.coils, nx, ny)
    }
}

/// Reconstructs with the configured solver on `enc`.
pub fn reconstruct(cfg: &PipelineConfig, enc: &Encoder, y: &ndarray::Array1<C64>) -> Result<ReconResult> {
    let (_, nx, ny) = enc.domain_shape();
    match cfg.recon.solver {
        SolverKind::Cg => cg_solve(enc, y, &cfg.recon.settings),
        SolverKind::FistaL1 => fista_solve(enc, y, Regularizer::L1Identity, &cfg.recon.settings),
        SolverKind::FistaWavelet => fista_solve(
            enc,
            y,
            Regularizer::L1Wavelet(cfg.recon.transform(nx, ny)),
            &cfg.recon.settings,
        ),
    }
}

/// Fits T2 on a coefficient stack (or echo stack when `basis` is `None`).
pub fn fit_stack(
    cfg: &PipelineConfig,
    stack: &Array3<C64>,
    basis: Option<&SubspaceBasis>,
    seq: &SequenceParams,
) -> Result<FitMaps> {
    let f = &cfg.fit;
    let t2_init = (f.t2_min * f.t2_max).sqrt();
    let init = TissueParams::new(f.t1, t2_init).with_eta(f.eta);
    let bounds = FitBounds {
        t2: (f.t2_min, f.t2_max),
        eta: f.fit_eta.then_some((f.eta_min, f.eta_max)),
    };
    let peak = (0..stack.dim().1 * stack.dim().2)
        .map(|idx| {
            let (ix, iy) = (idx / stack.dim().2, idx % stack.dim().2);
            (0..stack.dim().0).map(|i| stack[(i, ix, iy)].norm_sqr()).sum::<f64>()
        })
        .fold(0.0, f64::max);
    let min_energy = f.min_energy_fraction * peak;
    match f.method {
        FitKind::Nlls => fit_map(stack, basis, seq, FitMethod::Nlls, &init, &bounds, min_energy),
        FitKind::Dictionary => {
            let mut dict = Dictionary::t2_grid(f.t1, f.eta, f.t2_min, f.t2_max, f.dictionary_step, seq)?;
            if let Some(b) = basis {
                dict = dict.compress(b)?;
            }
            fit_map(stack, basis, seq, FitMethod::Dictionary(&dict), &init, &bounds, min_energy)
        }
    }
}

/// Mean and spread of the fitted T2 over each labeled region.
pub fn region_stats(phantom: &Phantom, maps: &FitMaps) -> Vec<RegionStats> {
    phantom
        .present_regions()
        .into_iter()
        .filter(|&id| id != 0)
        .map(|id| {
            let mut vals = Vec::new();
            let mut voxels = 0;
            for ((at, &l), &bad) in phantom.labels.indexed_iter().zip(maps.failed.iter()) {
                if l != id {
                    continue;
                }
                voxels += 1;
                if !bad && maps.t2[at].is_finite() {
                    vals.push(maps.t2[at]);
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            RegionStats {
                region: id,
                voxels,
                failed: voxels - vals.len(),
                t2_true: phantom.regions[&id].t2,
                t2_mean: mean,
                t2_std: var.sqrt(),
            }
        })
        .collect()
}

fn basis_matrix(b: &DMatrix<C64>) -> Array2<C64> {
    // rows are basis vectors, columns echoes
    Array2::from_shape_fn((b.ncols(), b.nrows()), |(k, t)| b[(t, k)])
}

fn bool_stack(m: &Array3<bool>) -> Array3<f64> {
    m.mapv(|b| f64::from(u8::from(b)))
}

fn write_outputs(cfg: &PipelineConfig, report: &PipelineReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let o = &report.outputs;
    io::write_real_array(&dir.join("labels"), &o.phantom.labels.mapv(f64::from))?;
    io::write_array(&dir.join("truth"), &o.truth)?;
    io::write_array(&dir.join("basis"), &basis_matrix(&o.basis.phi_k))?;
    io::write_real_array(&dir.join("masks"), &bool_stack(o.masks.as_array()))?;
    io::write_array(&dir.join("kspace"), &o.kspace)?;
    io::write_array(&dir.join("coefficients"), &o.recon.images)?;
    io::write_array(&dir.join("echoes"), &o.echoes)?;
    io::write_real_array(&dir.join("t2"), &o.maps.t2)?;
    io::write_array(&dir.join("rho"), &o.maps.rho)?;
    io::write_real_array(&dir.join("residual"), &o.maps.residual)?;
    io::write_real_array(&dir.join("failed"), &o.maps.failed.mapv(|b| f64::from(u8::from(b))))?;

    let rows: Vec<Vec<String>> = report
        .regions
        .iter()
        .map(|r| {
            vec![
                r.region.to_string(),
                r.voxels.to_string(),
                r.failed.to_string(),
                r.t2_true.to_string(),
                r.t2_mean.to_string(),
                r.t2_std.to_string(),
                r.bias().to_string(),
                r.relative_error().to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &dir.join("metrics.csv"),
        &["region", "voxels", "failed", "t2_true_ms", "t2_mean_ms", "t2_std_ms", "t2_bias_ms", "t2_rel_error"],
        &rows,
    )?;
    let summary = vec![
        vec!["image_nrmse".to_string(), report.image_nrmse.to_string()],
        vec!["basis_error".to_string(), report.basis_error.to_string()],
        vec!["iterations".to_string(), report.iterations.to_string()],
        vec!["converged".to_string(), report.converged.to_string()],
        vec!["failed_voxels".to_string(), report.failed_voxels.to_string()],
        vec!["prior_seed".to_string(), cfg.prior.seed.to_string()],
        vec!["mask_seed".to_string(), cfg.sampling.seed.to_string()],
        vec!["noise_seed".to_string(), cfg.noise_seed.to_string()],
    ];
    io::write_csv(&dir.join("summary.csv"), &["metric", "value"], &summary)?;
    let trace: Vec<Vec<String>> = report
        .objective_trace
        .iter()
        .enumerate()
        .map(|(i, v)| vec![i.to_string(), v.to_string()])
        .collect();
    io::write_csv(&dir.join("objective.csv"), &["iteration", "objective"], &trace)?;
    cfg.save(&dir.join("config.ini"))
}

/// Runs every stage; writes arrays and CSV reports into `out` when given.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineReport> {
    let start = Instant::now();
    let mut clock = Clock { last: start, laps: Vec::new() };
    clock.stage("config", cfg.validate())?;
    let phantom = clock.stage("phantom", make_phantom(&cfg.phantom))?;
    let seq = clock.stage("sequence", cfg.sequence.build())?;
    let (basis, basis_error) = clock.stage("basis", build_basis(cfg, &seq))?;
    let masks = clock.stage("mask", build_masks(cfg))?;
    let coils = clock.stage("coils", build_coils(cfg))?;
    let kspace = clock.stage(
        "simulate",
        simulate_acquisition(&phantom, &seq, &masks, Some(&coils), cfg.noise_sigma, cfg.noise_seed),
    )?;
    let recon = clock.stage("recon", {
        Encoder::new(masks.clone(), Some(coils), Some(basis.clone())).and_then(|enc| reconstruct(cfg, &enc, &kspace))
    })?;
    let echoes = back_project(&basis, &recon.images);
    let maps = clock.stage("fit", fit_stack(cfg, &recon.images, Some(&basis), &seq))?;
    let truth = clock.stage("truth", phantom.contrast_images(&seq))?;

    let regions = region_stats(&phantom, &maps);
    if let Some(r) = regions.iter().find(|r| r.failed == r.voxels) {
        return Err(Error::invalid(format!("every voxel of region {} failed to fit", r.region)).in_stage("fit"));
    }
    let report = PipelineReport {
        image_nrmse: nrmse(&echoes, &truth),
        basis_error,
        objective_trace: recon.objective_trace.clone(),
        iterations: recon.iterations,
        converged: recon.converged,
        failed_voxels: maps.failed.iter().zip(phantom.labels.iter()).filter(|(&f, &l)| f && l != 0).count(),
        regions,
        elapsed: Duration::ZERO,
        timings: Vec::new(),
        outputs: PipelineOutputs {
            phantom,
            sequence: seq,
            basis,
            masks,
            kspace,
            truth,
            recon,
            echoes,
            maps,
        },
    };
    if let Some(dir) = out {
        clock.stage("write", write_outputs(cfg, &report, dir))?;
    }
    Ok(PipelineReport {
        elapsed: start.elapsed(),
        timings: clock.laps,
        ..report
    })
}
