use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use ndarray::{Ix1, Ix2, Ix3};

use spinshuffle::config::PipelineConfig;
use spinshuffle::encoding::{Encoder, SamplingMasks};
use spinshuffle::error::{Error, Result};
use spinshuffle::io;
use spinshuffle::phantom::{make_phantom, simulate_acquisition};
use spinshuffle::pipeline::{build_basis, build_coils, build_masks, fit_stack, reconstruct, run_pipeline};
use spinshuffle::recon::back_project;
use spinshuffle::seqopt::{crlb, fisher_info, optimize_flips, FlipOptConfig, PowerBudget};
use spinshuffle::spin_sim::{simulate_fse, Param, TissueParams};
use spinshuffle::subspace::SubspaceBasis;

#[derive(Parser)]
#[command(name = "spinshuffle", version, about = "Subspace-constrained T2 mapping from simulated fast spin-echo data")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Shared {
    /// INI configuration file; defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides the config and rederives stage seeds).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct InputDir {
    /// Directory holding the previous stage's arrays (defaults to --out).
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize the phantom: labels, parameter maps, noiseless echo images.
    Phantom,
    /// Simulate an acquisition (k-space, masks), or one tissue's echo train.
    Sim {
        /// Write the echo train of this tissue as CSV instead, e.g. 1000,100.
        #[arg(long, value_name = "T1,T2")]
        tissue: Option<String>,
    },
    /// Build the training ensemble and its truncated basis.
    Basis,
    /// Draw the per-echo sampling masks.
    Mask,
    /// Reconstruct coefficient and echo images from `kspace` and `masks`.
    Recon(InputDir),
    /// Fit T2 maps from `coefficients`.
    Fit(InputDir),
    /// T2 Cramér-Rao bound of the configured train and of an optimized one.
    Crlb {
        #[arg(long, default_value_t = 1000.0)]
        t1: f64,
        #[arg(long, default_value_t = 100.0)]
        t2: f64,
        /// Power budget as the constant flip (deg) of equal power.
        #[arg(long, default_value_t = 120.0)]
        budget_flip: f64,
    },
    /// Run every stage and write all outputs with metrics.
    Pipeline,
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("SPINSHUFFLE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("SPINSHUFFLE_THREADS must be a nonnegative integer, got {v:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn load_config(shared: &Shared) -> Result<PipelineConfig> {
    let mut cfg = match &shared.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &shared.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let cfg = match load_config(&cli.shared) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let ctx = Ctx {
        out: cfg.output_dir.clone(),
        cfg,
        verbose: cli.shared.verbose,
    };
    match run(&ctx, &cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn run(ctx: &Ctx, cmd: &Cmd) -> Result<()> {
    let cfg = &ctx.cfg;
    let out = &ctx.out;
    match cmd {
        Cmd::Phantom => {
            let ph = make_phantom(&cfg.phantom)?;
            let seq = cfg.sequence.build()?;
            io::write_real_array(&out.join("labels"), &ph.labels.mapv(f64::from))?;
            io::write_real_array(&out.join("t1"), &ph.map(|t| t.t1))?;
            io::write_real_array(&out.join("t2"), &ph.map(|t| t.t2))?;
            io::write_array(&out.join("rho"), &ph.rho())?;
            io::write_array(&out.join("truth"), &ph.contrast_images(&seq)?)?;
            ctx.log(format!("phantom {}x{} with regions {:?}", ph.dims.0, ph.dims.1, ph.present_regions()));
        }
        Cmd::Sim { tissue: Some(spec) } => {
            let tissue = parse_tissue(spec)?;
            let seq = cfg.sequence.build()?;
            let sig = simulate_fse(&tissue, &seq)?;
            let rows: Vec<Vec<String>> = seq
                .echo_times()
                .iter()
                .zip(&sig.samples)
                .map(|(t, s)| vec![t.to_string(), s.re.to_string(), s.im.to_string()])
                .collect();
            io::write_csv(&out.join("evolution.csv"), &["te_ms", "re", "im"], &rows)?;
            ctx.log(format!("{} echoes written", rows.len()));
        }
        Cmd::Sim { tissue: None } => {
            let ph = make_phantom(&cfg.phantom)?;
            let seq = cfg.sequence.build()?;
            let masks = build_masks(cfg)?;
            let coils = build_coils(cfg)?;
            let y = simulate_acquisition(&ph, &seq, &masks, Some(&coils), cfg.noise_sigma, cfg.noise_seed)?;
            write_masks(&out.join("masks"), &masks)?;
            io::write_array(&out.join("kspace"), &y)?;
            io::write_array(&out.join("truth"), &ph.contrast_images(&seq)?)?;
            ctx.log(format!("{} samples, noise sigma {}", y.len(), cfg.noise_sigma));
        }
        Cmd::Basis => {
            let seq = cfg.sequence.build()?;
            let (basis, err) = build_basis(cfg, &seq)?;
            write_basis(&out.join("basis"), &basis)?;
            let rows: Vec<Vec<String>> = basis
                .singular_values
                .iter()
                .enumerate()
                .map(|(i, s)| vec![(i + 1).to_string(), s.to_string()])
                .collect();
            io::write_csv(&out.join("singular_values.csv"), &["index", "singular_value"], &rows)?;
            ctx.log(format!("rank {} basis, ensemble residual {err:.3e}", basis.rank()));
        }
        Cmd::Mask => {
            let masks = build_masks(cfg)?;
            write_masks(&out.join("masks"), &masks)?;
            let rows: Vec<Vec<String>> = masks
                .counts()
                .iter()
                .enumerate()
                .map(|(i, c)| vec![(i + 1).to_string(), c.to_string()])
                .collect();
            io::write_csv(&out.join("mask_counts.csv"), &["echo", "samples"], &rows)?;
            let (nx, ny) = masks.dims();
            ctx.log(format!(
                "{} samples over {} echoes, effective R {:.2}",
                masks.total(),
                masks.n_echoes(),
                (nx * ny * masks.n_echoes()) as f64 / masks.total() as f64
            ));
        }
        Cmd::Recon(input) => {
            let dir = input.input.as_deref().unwrap_or(out);
            let seq = cfg.sequence.build()?;
            let masks = read_masks(&dir.join("masks"))?;
            let y = io::read_array_nd::<Ix1>(&dir.join("kspace"))?;
            let basis = load_or_build_basis(ctx, dir, &seq)?;
            let enc = Encoder::new(masks, Some(build_coils(cfg)?), Some(basis.clone()))?;
            let r = reconstruct(cfg, &enc, &y)?;
            io::write_array(&out.join("coefficients"), &r.images)?;
            io::write_array(&out.join("echoes"), &back_project(&basis, &r.images))?;
            let trace: Vec<Vec<String>> = r
                .objective_trace
                .iter()
                .enumerate()
                .map(|(i, v)| vec![i.to_string(), v.to_string()])
                .collect();
            io::write_csv(&out.join("objective.csv"), &["iteration", "objective"], &trace)?;
            ctx.log(format!("{} iterations, converged {}", r.iterations, r.converged));
        }
        Cmd::Fit(input) => {
            let dir = input.input.as_deref().unwrap_or(out);
            let seq = cfg.sequence.build()?;
            let coef = io::read_array_nd::<Ix3>(&dir.join("coefficients"))?;
            let basis = load_or_build_basis(ctx, dir, &seq)?;
            let maps = fit_stack(cfg, &coef, Some(&basis), &seq)?;
            io::write_real_array(&out.join("t2"), &maps.t2)?;
            io::write_array(&out.join("rho"), &maps.rho)?;
            io::write_real_array(&out.join("residual"), &maps.residual)?;
            io::write_real_array(&out.join("failed"), &maps.failed.mapv(|b| f64::from(u8::from(b))))?;
            ctx.log(format!("{} voxels not fitted", maps.failed.iter().filter(|&&f| f).count()));
        }
        Cmd::Crlb { t1, t2, budget_flip } => {
            let tissue = TissueParams::new(*t1, *t2);
            let seq = cfg.sequence.build()?;
            let budget = PowerBudget::of_constant(seq.n_echoes, *budget_flip)?;
            let params = [Param::Rho, Param::T2];
            let sigma = if cfg.noise_sigma > 0.0 { cfg.noise_sigma } else { 1.0 };
            let bound = |flips: Vec<f64>| {
                fisher_info(&tissue, &seq.with_flips(flips), sigma, &params).and_then(|i| crlb(&i, Param::T2))
            };
            let opt = optimize_flips(&tissue, &seq, &budget, Param::T2, &FlipOptConfig::default())?;
            let rows = vec![
                vec!["configured".to_string(), bound(seq.flips_deg.clone())?.to_string()],
                vec![
                    "equal_power_constant".to_string(),
                    bound(vec![budget.equal_power_flip(seq.n_echoes); seq.n_echoes])?.to_string(),
                ],
                vec!["optimized".to_string(), bound(opt.flips_deg.clone())?.to_string()],
            ];
            io::write_csv(&out.join("crlb.csv"), &["schedule", "crlb_t2_ms2"], &rows)?;
            io::write_schedule(&out.join("schedule.csv"), &opt.flips_deg)?;
            for r in &rows {
                ctx.log(format!("{:<22} {}", r[0], r[1]));
            }
        }
        Cmd::Pipeline => {
            let r = run_pipeline(cfg, Some(out))?;
            for s in &r.regions {
                ctx.log(format!(
                    "region {}: T2 {:.2} ± {:.2} ms (true {}), rel error {:.4}",
                    s.region, s.t2_mean, s.t2_std, s.t2_true, s.relative_error()
                ));
            }
            ctx.log(format!("image NRMSE {:.4}", r.image_nrmse));
            for (stage, t) in &r.timings {
                ctx.log(format!("  {stage:<9} {t:.2?}"));
            }
        }
    }
    ctx.log(format!("outputs in {}", out.display()));
    Ok(())
}

fn parse_tissue(spec: &str) -> Result<TissueParams> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--tissue expects T1,T2 in ms, got {spec:?}")))?;
    match v.as_slice() {
        [t1, t2] => Ok(TissueParams::new(*t1, *t2)),
        _ => Err(Error::Config(format!("--tissue expects T1,T2 in ms, got {spec:?}"))),
    }
}

fn write_masks(stem: &Path, m: &SamplingMasks) -> Result<()> {
    io::write_real_array(stem, &m.as_array().mapv(|b| f64::from(u8::from(b))))
}

fn read_masks(stem: &Path) -> Result<SamplingMasks> {
    SamplingMasks::new(io::read_array_nd::<Ix3>(stem)?.mapv(|v| v.re > 0.5))
}

fn write_basis(stem: &Path, b: &SubspaceBasis) -> Result<()> {
    let phi = &b.phi_k;
    io::write_array(stem, &ndarray::Array2::from_shape_fn((phi.ncols(), phi.nrows()), |(k, t)| phi[(t, k)]))
}

fn load_or_build_basis(ctx: &Ctx, dir: &Path, seq: &spinshuffle::spin_sim::SequenceParams) -> Result<SubspaceBasis> {
    let stem = dir.join("basis");
    if stem.with_extension("hdr").exists() {
        let a = io::read_array_nd::<Ix2>(&stem)?;
        let (k, t) = a.dim();
        ctx.log(format!("using basis from {}", stem.display()));
        return SubspaceBasis::from_columns(DMatrix::from_fn(t, k, |i, j| a[(j, i)]));
    }
    Ok(build_basis(&ctx.cfg, seq)?.0)
}
