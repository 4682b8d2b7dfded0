//! Pipeline configuration in INI form.
//!
//! Every field has a default, so an empty file is a valid configuration of
//! the desk scene. Floats are written in shortest round-trip form, making
//! `to_ini` → `from_ini` lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::{Ini, ParseOption, Properties};

use crate::error::{Error, Result};
use crate::phantom::{Ellipse, PhantomSpec};
use crate::recon::{SolverConfig, StepRule};
use crate::sampling::{DensityProfile, DensityShape};
use crate::spin_sim::{SequenceParams, TissueParams, C64};
use crate::subspace::{PriorSampling, TissuePrior, DEFAULT_ENSEMBLE_SIZE};
use crate::wavelet::Transform;

/// Refocusing train shape.
#[derive(Clone, Debug, PartialEq)]
pub enum FlipSpec {
    Constant(f64),
    Ramp(f64, f64),
    List(Vec<f64>),
}

impl FlipSpec {
    fn parse(s: &str) -> Result<Self> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| Error::Config(format!("bad flip angle {t:?}")));
        match toks.as_slice() {
            ["ramp", a, b] => Ok(FlipSpec::Ramp(num(a)?, num(b)?)),
            [a] => Ok(FlipSpec::Constant(num(a)?)),
            [] => Err(Error::Config("empty flips".into())),
            many => Ok(FlipSpec::List(many.iter().map(|t| num(t)).collect::<Result<_>>()?)),
        }
    }

    fn render(&self) -> String {
        match self {
            FlipSpec::Constant(a) => format!("{a}"),
            FlipSpec::Ramp(a, b) => format!("ramp {a} {b}"),
            FlipSpec::List(v) => v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub n_echoes: usize,
    pub echo_spacing_ms: f64,
    pub excitation_deg: f64,
    pub flips: FlipSpec,
}

impl SequenceConfig {
    pub fn build(&self) -> Result<SequenceParams> {
        let t = self.n_echoes;
        let mut seq = match &self.flips {
            FlipSpec::Constant(a) => SequenceParams::constant(t, self.echo_spacing_ms, *a),
            FlipSpec::Ramp(a, b) => SequenceParams::ramp(t, self.echo_spacing_ms, *a, *b),
            FlipSpec::List(v) => {
                if v.len() != t {
                    return Err(Error::Config(format!("{} flips listed for {t} echoes", v.len())));
                }
                SequenceParams::from_flips(v.clone(), self.echo_spacing_ms)
            }
        };
        seq.excitation_deg = self.excitation_deg;
        seq.validate()?;
        Ok(seq)
    }
}

/// How per-echo masks are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOrdering {
    /// An independent variable-density draw per echo, each at the target
    /// acceleration.
    PerEcho,
    /// One draw at the target acceleration, partitioned across echoes
    /// center-out.
    CenterOut,
    /// One draw partitioned across echoes at random.
    Randomized,
}

impl MaskOrdering {
    pub fn name(&self) -> &'static str {
        match self {
            MaskOrdering::PerEcho => "per-echo",
            MaskOrdering::CenterOut => "center-out",
            MaskOrdering::Randomized => "randomized",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "per-echo" => Ok(MaskOrdering::PerEcho),
            "center-out" => Ok(MaskOrdering::CenterOut),
            "randomized" => Ok(MaskOrdering::Randomized),
            _ => Err(Error::Config(format!("unknown mask ordering {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub profile: DensityProfile,
    pub ordering: MaskOrdering,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Cg,
    FistaL1,
    FistaWavelet,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Cg => "cg",
            SolverKind::FistaL1 => "fista-l1",
            SolverKind::FistaWavelet => "fista-wavelet",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "cg" => Ok(SolverKind::Cg),
            "fista-l1" => Ok(SolverKind::FistaL1),
            "fista-wavelet" => Ok(SolverKind::FistaWavelet),
            _ => Err(Error::Config(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub solver: SolverKind,
    pub settings: SolverConfig,
    /// Haar levels for `fista-wavelet`; 0 picks the deepest the grid allows.
    pub wavelet_levels: usize,
}

impl ReconConfig {
    pub fn transform(&self, nx: usize, ny: usize) -> Transform {
        if self.wavelet_levels == 0 {
            Transform::max_haar(nx, ny)
        } else {
            Transform::Haar { levels: self.wavelet_levels }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitKind {
    Nlls,
    Dictionary,
}

impl FitKind {
    pub fn name(&self) -> &'static str {
        match self {
            FitKind::Nlls => "nlls",
            FitKind::Dictionary => "dictionary",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "nlls" => Ok(FitKind::Nlls),
            "dictionary" => Ok(FitKind::Dictionary),
            _ => Err(Error::Config(format!("unknown fit method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub method: FitKind,
    /// Nominal T1 (ms) held fixed during fitting.
    pub t1: f64,
    pub eta: f64,
    pub t2_min: f64,
    pub t2_max: f64,
    /// Fit η within `[eta_min, eta_max]` when true.
    pub fit_eta: bool,
    pub eta_min: f64,
    pub eta_max: f64,
    /// T2 spacing of the dictionary grid (ms).
    pub dictionary_step: f64,
    /// Voxels below this fraction of the peak voxel energy are not fitted.
    pub min_energy_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Master seed; `with_seed` rederives the stage seeds from it.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub sequence: SequenceConfig,
    pub prior: TissuePrior,
    pub ensemble_size: usize,
    pub rank: usize,
    pub sampling: SamplingConfig,
    pub coils: usize,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub recon: ReconConfig,
    pub fit: FitConfig,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSpec::desk(),
            sequence: SequenceConfig {
                n_echoes: 32,
                echo_spacing_ms: 10.0,
                excitation_deg: 90.0,
                flips: FlipSpec::Constant(180.0),
            },
            prior: TissuePrior::default(),
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            rank: 3,
            sampling: SamplingConfig {
                profile: DensityProfile::default(),
                ordering: MaskOrdering::PerEcho,
                seed: 1,
            },
            coils: 1,
            noise_sigma: 0.005,
            noise_seed: 2,
            recon: ReconConfig {
                solver: SolverKind::Cg,
                settings: SolverConfig {
                    max_iters: 100,
                    tolerance: 1e-6,
                    lambda: 0.0,
                    mu: 0.0,
                    step_rule: StepRule::PowerIteration,
                },
                wavelet_levels: 0,
            },
            fit: FitConfig {
                method: FitKind::Nlls,
                t1: 1000.0,
                eta: 1.0,
                t2_min: 5.0,
                t2_max: 2000.0,
                fit_eta: false,
                eta_min: 0.5,
                eta_max: 1.5,
                dictionary_step: 1.0,
                min_energy_fraction: 1e-3,
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

fn get<'a>(p: Option<&'a Properties>, key: &str) -> Option<&'a str> {
    p.and_then(|p| p.get(key))
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {v:?} is not a valid number")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key} = {v:?} is not a boolean"))),
    }
}

fn nums(section: &str, key: &str, v: &str, n: usize) -> Result<Vec<f64>> {
    let out: Vec<f64> = v
        .split_whitespace()
        .map(|t| parse_num(section, key, t))
        .collect::<Result<_>>()?;
    if out.len() != n {
        return Err(Error::Config(format!("[{section}] {key} needs {n} numbers, got {}", out.len())));
    }
    Ok(out)
}

macro_rules! set_num {
    ($ini:expr, $sec:expr, $key:expr, $field:expr) => {
        if let Some(v) = get($ini.section(Some($sec)), $key) {
            $field = parse_num($sec, $key, v)?;
        }
    };
}

const KNOWN_SECTIONS: &[&str] = &[
    "run", "phantom", "sequence", "prior", "subspace", "sampling", "coils", "noise", "recon", "fit",
];

impl PipelineConfig {
    /// Sets the master seed and derives the prior, mask and noise seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.prior.seed = seed;
        self.sampling.seed = seed.wrapping_add(1);
        self.noise_seed = seed.wrapping_add(2);
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ini(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ini())?;
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(e.to_string()))?;
        for name in ini.sections().flatten() {
            if !KNOWN_SECTIONS.contains(&name) && !name.starts_with("region.") && !name.starts_with("ellipse.") {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        let mut c = PipelineConfig::default();

        if let Some(v) = get(ini.section(Some("run")), "seed") {
            c = c.with_seed(parse_num("run", "seed", v)?);
        }
        if let Some(v) = get(ini.section(Some("run")), "output_dir") {
            c.output_dir = PathBuf::from(v.trim());
        }

        // phantom: explicit regions/ellipses replace the desk scene
        let ph = ini.section(Some("phantom"));
        let mut dims = c.phantom.dims;
        if let Some(v) = get(ph, "nx") {
            dims.0 = parse_num("phantom", "nx", v)?;
        }
        if let Some(v) = get(ph, "ny") {
            dims.1 = parse_num("phantom", "ny", v)?;
        }
        let mut regions = BTreeMap::new();
        let mut ellipses: Vec<(usize, Ellipse)> = Vec::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else { continue };
            if let Some(id) = name.strip_prefix("region.") {
                let id: u32 = parse_num(name, "id", id)?;
                let mut t = TissueParams::new(1000.0, 100.0);
                let p = Some(props);
                if let Some(v) = get(p, "t1") {
                    t.t1 = parse_num(name, "t1", v)?;
                }
                if let Some(v) = get(p, "t2") {
                    t.t2 = parse_num(name, "t2", v)?;
                }
                if let Some(v) = get(p, "eta") {
                    t.eta = parse_num(name, "eta", v)?;
                }
                if let Some(v) = get(p, "rho") {
                    let r = nums(name, "rho", v, 2)?;
                    t.rho = C64::new(r[0], r[1]);
                }
                regions.insert(id, t);
            } else if let Some(k) = name.strip_prefix("ellipse.") {
                let k: usize = parse_num(name, "index", k)?;
                let p = Some(props);
                let need = |key: &str| {
                    get(p, key).ok_or_else(|| Error::Config(format!("[{name}] missing {key}")))
                };
                let center = nums(name, "center", need("center")?, 2)?;
                let axes = nums(name, "axes", need("axes")?, 2)?;
                let angle_deg = match get(p, "angle") {
                    Some(v) => parse_num(name, "angle", v)?,
                    None => 0.0,
                };
                let region = parse_num(name, "region", need("region")?)?;
                ellipses.push((
                    k,
                    Ellipse {
                        center: (center[0], center[1]),
                        axes: (axes[0], axes[1]),
                        angle_deg,
                        region,
                    },
                ));
            }
        }
        if !regions.is_empty() || !ellipses.is_empty() {
            ellipses.sort_by_key(|(k, _)| *k);
            c.phantom = PhantomSpec {
                dims,
                ellipses: ellipses.into_iter().map(|(_, e)| e).collect(),
                regions,
            };
        } else {
            c.phantom.dims = dims;
        }

        set_num!(ini, "sequence", "n_echoes", c.sequence.n_echoes);
        set_num!(ini, "sequence", "echo_spacing", c.sequence.echo_spacing_ms);
        set_num!(ini, "sequence", "excitation", c.sequence.excitation_deg);
        if let Some(v) = get(ini.section(Some("sequence")), "flips") {
            c.sequence.flips = FlipSpec::parse(v)?;
        }

        let pr = ini.section(Some("prior"));
        if let Some(v) = get(pr, "t1_range") {
            let r = nums("prior", "t1_range", v, 2)?;
            c.prior.t1_range = (r[0], r[1]);
        }
        if let Some(v) = get(pr, "t2_range") {
            let r = nums("prior", "t2_range", v, 2)?;
            c.prior.t2_range = (r[0], r[1]);
        }
        if let Some(v) = get(pr, "sampling") {
            c.prior.sampling = match v.trim() {
                "log-uniform" => PriorSampling::LogUniform,
                "uniform" => PriorSampling::Uniform,
                other => return Err(Error::Config(format!("unknown prior sampling {other:?}"))),
            };
        }
        set_num!(ini, "prior", "size", c.ensemble_size);
        set_num!(ini, "prior", "seed", c.prior.seed);
        set_num!(ini, "subspace", "rank", c.rank);

        let sa = ini.section(Some("sampling"));
        if let Some(v) = get(sa, "shape") {
            c.sampling.profile.shape = match v.trim() {
                "polynomial" => DensityShape::Polynomial { power: 3.0 },
                "gaussian" => DensityShape::Gaussian { sigma: 0.3 },
                other => return Err(Error::Config(format!("unknown density shape {other:?}"))),
            };
        }
        if let Some(v) = get(sa, "shape_param") {
            let x = parse_num("sampling", "shape_param", v)?;
            c.sampling.profile.shape = match c.sampling.profile.shape {
                DensityShape::Polynomial { .. } => DensityShape::Polynomial { power: x },
                DensityShape::Gaussian { .. } => DensityShape::Gaussian { sigma: x },
            };
        }
        set_num!(ini, "sampling", "center", c.sampling.profile.fully_sampled_radius);
        set_num!(ini, "sampling", "accel", c.sampling.profile.accel);
        if let Some(v) = get(sa, "ordering") {
            c.sampling.ordering = MaskOrdering::parse(v.trim())?;
        }
        set_num!(ini, "sampling", "seed", c.sampling.seed);
        set_num!(ini, "coils", "count", c.coils);
        set_num!(ini, "noise", "sigma", c.noise_sigma);
        set_num!(ini, "noise", "seed", c.noise_seed);

        let rc = ini.section(Some("recon"));
        if let Some(v) = get(rc, "solver") {
            c.recon.solver = SolverKind::parse(v.trim())?;
        }
        set_num!(ini, "recon", "max_iters", c.recon.settings.max_iters);
        set_num!(ini, "recon", "tolerance", c.recon.settings.tolerance);
        set_num!(ini, "recon", "lambda", c.recon.settings.lambda);
        set_num!(ini, "recon", "mu", c.recon.settings.mu);
        set_num!(ini, "recon", "wavelet_levels", c.recon.wavelet_levels);
        if let Some(v) = get(rc, "lipschitz") {
            c.recon.settings.step_rule = match v.trim() {
                "power" => StepRule::PowerIteration,
                s => StepRule::Fixed(parse_num("recon", "lipschitz", s)?),
            };
        }

        let fi = ini.section(Some("fit"));
        if let Some(v) = get(fi, "method") {
            c.fit.method = FitKind::parse(v.trim())?;
        }
        set_num!(ini, "fit", "t1", c.fit.t1);
        set_num!(ini, "fit", "eta", c.fit.eta);
        set_num!(ini, "fit", "t2_min", c.fit.t2_min);
        set_num!(ini, "fit", "t2_max", c.fit.t2_max);
        if let Some(v) = get(fi, "fit_eta") {
            c.fit.fit_eta = parse_bool("fit", "fit_eta", v)?;
        }
        set_num!(ini, "fit", "eta_min", c.fit.eta_min);
        set_num!(ini, "fit", "eta_max", c.fit.eta_max);
        set_num!(ini, "fit", "dictionary_step", c.fit.dictionary_step);
        set_num!(ini, "fit", "min_energy_fraction", c.fit.min_energy_fraction);

        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rank == 0 || self.rank > self.sequence.n_echoes {
            return bad(format!("rank {} must lie in 1..={}", self.rank, self.sequence.n_echoes));
        }
        if self.coils == 0 {
            return bad("at least one coil required".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be nonnegative".into());
        }
        if !(self.fit.t2_min > 0.0 && self.fit.t2_min < self.fit.t2_max) {
            return bad("fit needs 0 < t2_min < t2_max".into());
        }
        if self.fit.fit_eta && !(self.fit.eta_min > 0.0 && self.fit.eta_min < self.fit.eta_max) {
            return bad("fit needs 0 < eta_min < eta_max".into());
        }
        if !(self.fit.dictionary_step > 0.0) {
            return bad("dictionary_step must be positive".into());
        }
        if self.ensemble_size == 0 {
            return bad("prior size must be positive".into());
        }
        self.sequence.build()?;
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[run]\nseed = {}\noutput_dir = {}\n", self.seed, self.output_dir.display());
        let _ = writeln!(w, "[phantom]\nnx = {}\nny = {}\n", self.phantom.dims.0, self.phantom.dims.1);
        for (id, t) in &self.phantom.regions {
            let _ = writeln!(
                w,
                "[region.{id}]\nt1 = {}\nt2 = {}\neta = {}\nrho = {} {}\n",
                t.t1, t.t2, t.eta, t.rho.re, t.rho.im
            );
        }
        for (k, e) in self.phantom.ellipses.iter().enumerate() {
            let _ = writeln!(
                w,
                "[ellipse.{}]\ncenter = {} {}\naxes = {} {}\nangle = {}\nregion = {}\n",
                k + 1,
                e.center.0,
                e.center.1,
                e.axes.0,
                e.axes.1,
                e.angle_deg,
                e.region
            );
        }
        let q = &self.sequence;
        let _ = writeln!(
            w,
            "[sequence]\nn_echoes = {}\necho_spacing = {}\nexcitation = {}\nflips = {}\n",
            q.n_echoes,
            q.echo_spacing_ms,
            q.excitation_deg,
            q.flips.render()
        );
        let p = &self.prior;
        let _ = writeln!(
            w,
            "[prior]\nt1_range = {} {}\nt2_range = {} {}\nsampling = {}\nsize = {}\nseed = {}\n",
            p.t1_range.0,
            p.t1_range.1,
            p.t2_range.0,
            p.t2_range.1,
            match p.sampling {
                PriorSampling::Uniform => "uniform",
                _ => "log-uniform",
            },
            self.ensemble_size,
            p.seed
        );
        let _ = writeln!(w, "[subspace]\nrank = {}\n", self.rank);
        let (shape, param) = match self.sampling.profile.shape {
            DensityShape::Polynomial { power } => ("polynomial", power),
            DensityShape::Gaussian { sigma } => ("gaussian", sigma),
        };
        let _ = writeln!(
            w,
            "[sampling]\nshape = {shape}\nshape_param = {param}\ncenter = {}\naccel = {}\nordering = {}\nseed = {}\n",
            self.sampling.profile.fully_sampled_radius,
            self.sampling.profile.accel,
            self.sampling.ordering.name(),
            self.sampling.seed
        );
        let _ = writeln!(w, "[coils]\ncount = {}\n", self.coils);
        let _ = writeln!(w, "[noise]\nsigma = {}\nseed = {}\n", self.noise_sigma, self.noise_seed);
        let r = &self.recon;
        let lip = match r.settings.step_rule {
            StepRule::PowerIteration => "power".to_string(),
            StepRule::Fixed(l) => l.to_string(),
        };
        let _ = writeln!(
            w,
            "[recon]\nsolver = {}\nmax_iters = {}\ntolerance = {}\nlambda = {}\nmu = {}\nwavelet_levels = {}\nlipschitz = {lip}\n",
            r.solver.name(),
            r.settings.max_iters,
            r.settings.tolerance,
            r.settings.lambda,
            r.settings.mu,
            r.wavelet_levels
        );
        let f = &self.fit;
        let _ = writeln!(
            w,
            "[fit]\nmethod = {}\nt1 = {}\neta = {}\nt2_min = {}\nt2_max = {}\nfit_eta = {}\neta_min = {}\neta_max = {}\ndictionary_step = {}\nmin_energy_fraction = {}",
            f.method.name(),
            f.t1,
            f.eta,
            f.t2_min,
            f.t2_max,
            f.fit_eta,
            f.eta_min,
            f.eta_max,
            f.dictionary_step,
            f.min_energy_fraction
        );
        s
    }
}
