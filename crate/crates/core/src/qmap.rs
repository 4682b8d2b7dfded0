//! Per-voxel parameter estimation: variable-projection least squares in the
//! echo or subspace domain, and dictionary matching.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spin_sim::{simulate_unchecked, SequenceParams, TissueParams, C64, REL_STEP};
use crate::subspace::SubspaceBasis;

/// Search box for the nonlinear unknowns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitBounds {
    /// T2 range (ms).
    pub t2: (f64, f64),
    /// Fit the B1 scale inside this range; `None` holds it at the initial value.
    pub eta: Option<(f64, f64)>,
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            t2: (5.0, 2000.0),
            eta: None,
        }
    }
}

impl FitBounds {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t2;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::invalid(format!("T2 bounds ({lo}, {hi}) must satisfy 0 < lo < hi")));
        }
        if let Some((lo, hi)) = self.eta {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::invalid(format!("eta bounds ({lo}, {hi}) must satisfy 0 < lo < hi")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitResult {
    pub rho: C64,
    /// NaN when `defined` is false.
    pub t2: f64,
    /// T1 of the model (fixed nominal, or the matched atom's).
    pub t1: f64,
    pub eta: f64,
    /// `½‖x − ρ f‖²` at the solution.
    pub residual: f64,
    pub converged: bool,
    /// False for an all-zero signal, where T2 is not identifiable.
    pub defined: bool,
    /// Matched atom for dictionary fits.
    pub atom: Option<usize>,
}

impl FitResult {
    fn undefined(t1: f64, eta: f64) -> Self {
        Self {
            rho: C64::new(0.0, 0.0),
            t2: f64::NAN,
            t1,
            eta,
            residual: 0.0,
            converged: true,
            defined: false,
            atom: None,
        }
    }
}

/// Points of the log-spaced T2 scan that seeds the golden-section search.
pub const COARSE_POINTS: usize = 48;
// log-T2 width; the Gauss–Newton polish finishes from here
const GOLDEN_TOL: f64 = 1e-5;
const POLISH_STEPS: usize = 20;
const ETA_ITERS: usize = 40;

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn energy(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// Model evolutions at unit density, optionally compressed by `Φ_K^H`.
struct Model<'a> {
    seq: &'a SequenceParams,
    basis: Option<&'a SubspaceBasis>,
    t1: f64,
}

impl Model<'_> {
    fn eval(&self, t2: f64, eta: f64) -> Vec<C64> {
        let tissue = TissueParams {
            rho: C64::new(1.0, 0.0),
            t1: self.t1,
            t2,
            eta,
        };
        let f = simulate_unchecked(&tissue, self.seq);
        match self.basis {
            Some(b) => b.coefficients(&f),
            None => f,
        }
    }

    fn d_t2(&self, t2: f64, eta: f64) -> Vec<C64> {
        let h = REL_STEP * t2;
        let up = self.eval(t2 + h, eta);
        let dn = self.eval(t2 - h, eta);
        up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }
}

/// Projected cost `½‖x − ρ*f‖²` with `ρ* = ⟨f,x⟩/‖f‖²`.
fn projected(f: &[C64], x: &[C64], x_energy: f64) -> (f64, C64) {
    let ff = energy(f);
    if ff == 0.0 {
        return (0.5 * x_energy, C64::new(0.0, 0.0));
    }
    let rho = dot(f, x) / ff;
    // summed directly: the expanded form cancels badly near the optimum
    let cost = 0.5 * x.iter().zip(f).map(|(a, b)| (a - rho * b).norm_sqr()).sum::<f64>();
    (cost, rho)
}

/// T2 fit at fixed `eta`. `grid` caches the coarse-scan evolutions.
fn fit_t2(
    model: &Model<'_>,
    x: &[C64],
    eta: f64,
    bounds: (f64, f64),
    grid: Option<&CoarseGrid>,
) -> (f64, C64, f64, bool) {
    let xe = energy(x);
    let cost_at = |t2: f64| projected(&model.eval(t2, eta), x, xe);
    let (lo, hi) = (bounds.0.ln(), bounds.1.ln());
    let node = |j: usize| lo + (hi - lo) * j as f64 / (COARSE_POINTS - 1) as f64;

    let scan: Vec<f64> = match grid {
        Some(g) => g.atoms.iter().map(|f| projected(f, x, xe).0).collect(),
        None => (0..COARSE_POINTS).map(|j| cost_at(node(j).exp()).0).collect(),
    };
    let best = scan
        .iter()
        .enumerate()
        .fold(0, |b, (j, &c)| if c < scan[b] { j } else { b });

    // golden-section on log T2 inside the bracketing cells
    let (mut a, mut b) = (node(best.saturating_sub(1)), node((best + 1).min(COARSE_POINTS - 1)));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = cost_at(c.exp()).0;
    let mut fd = cost_at(d.exp()).0;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cost_at(c.exp()).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cost_at(d.exp()).0;
        }
    }
    let mut t2 = (0.5 * (a + b)).exp();
    let (mut cost, mut rho) = cost_at(t2);
    let scan_best = node(best).exp();
    let scan_cost = scan[best];
    if scan_cost < cost {
        t2 = scan_best;
        let r = cost_at(t2);
        cost = r.0;
        rho = r.1;
    }

    // Gauss–Newton polish with the projected residual
    let mut converged = false;
    for _ in 0..POLISH_STEPS {
        let f = model.eval(t2, eta);
        let g = model.d_t2(t2, eta);
        let ff = energy(&f);
        if ff == 0.0 || rho.norm() == 0.0 {
            converged = true;
            break;
        }
        let r: Vec<C64> = x.iter().zip(&f).map(|(xi, fi)| xi - rho * fi).collect();
        // Jacobian of the residual, with ρ re-projected: −ρ P⊥ g
        let gf = dot(&f, &g) / ff;
        let j: Vec<C64> = g.iter().zip(&f).map(|(gi, fi)| -rho * (gi - gf * fi)).collect();
        let jj = energy(&j);
        if jj == 0.0 {
            converged = true;
            break;
        }
        let step = -dot(&j, &r).re / jj;
        if step.abs() <= 1e-13 * t2 {
            converged = true;
            break;
        }
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..20 {
            let cand = (t2 + s * step).clamp(bounds.0, bounds.1);
            let (cc, cr) = cost_at(cand);
            // tiny steps are taken at round-off level, where the cost
            // cannot resolve them
            if cc <= cost || ((s * step).abs() <= 1e-6 * t2 && cc <= cost * (1.0 + 1e-12)) {
                moved = cand != t2;
                t2 = cand;
                cost = cc;
                rho = cr;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            converged = true;
            break;
        }
    }
    (t2, rho, cost, converged)
}

/// Coarse-scan evolutions shared across voxels at a fixed `eta`.
struct CoarseGrid {
    atoms: Vec<Vec<C64>>,
}

impl CoarseGrid {
    fn new(model: &Model<'_>, eta: f64, bounds: (f64, f64)) -> Self {
        let (lo, hi) = (bounds.0.ln(), bounds.1.ln());
        let atoms = (0..COARSE_POINTS)
            .map(|j| {
                let t2 = (lo + (hi - lo) * j as f64 / (COARSE_POINTS - 1) as f64).exp();
                model.eval(t2, eta)
            })
            .collect();
        Self { atoms }
    }
}

fn fit_voxel(
    model: &Model<'_>,
    x: &[C64],
    init: &TissueParams,
    bounds: &FitBounds,
    grid: Option<&CoarseGrid>,
) -> FitResult {
    if x.iter().all(|v| *v == C64::new(0.0, 0.0)) {
        return FitResult::undefined(init.t1, init.eta);
    }
    let (t2, rho, cost, converged, eta) = match bounds.eta {
        None => {
            let (t2, rho, cost, conv) = fit_t2(model, x, init.eta, bounds.t2, grid);
            (t2, rho, cost, conv, init.eta)
        }
        Some((lo, hi)) => {
            // golden-section over eta with the T2 fit nested inside
            let inner = |eta: f64| fit_t2(model, x, eta, bounds.t2, None);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let (mut a, mut b) = (lo, hi);
            let mut c = b - g * (b - a);
            let mut d = a + g * (b - a);
            let mut rc = inner(c);
            let mut rd = inner(d);
            for _ in 0..ETA_ITERS {
                if rc.2 <= rd.2 {
                    b = d;
                    d = c;
                    rd = rc;
                    c = b - g * (b - a);
                    rc = inner(c);
                } else {
                    a = c;
                    c = d;
                    rc = rd;
                    d = a + g * (b - a);
                    rd = inner(d);
                }
            }
            let (best, eta) = if rc.2 <= rd.2 { (rc, c) } else { (rd, d) };
            (best.0, best.1, best.2, best.3, eta)
        }
    };
    FitResult {
        rho,
        t2,
        t1: init.t1,
        eta,
        residual: cost,
        converged,
        defined: true,
        atom: None,
    }
}

fn check_init(init: &TissueParams, bounds: &FitBounds) -> Result<()> {
    bounds.validate()?;
    let (lo, hi) = bounds.t2;
    if !(init.t2 >= lo && init.t2 <= hi) || !(init.t1 > 0.0) || !(init.eta > 0.0) {
        return Err(Error::invalid(format!(
            "initial guess (T1 {}, T2 {}, eta {}) outside bounds",
            init.t1, init.t2, init.eta
        )));
    }
    Ok(())
}

/// Fits `x ≈ ρ f(T2)` in the echo domain. T1 (and η unless bounded) come
/// from `init`; ρ is eliminated in closed form.
pub fn fit_voxel_nlls(
    signal: &[C64],
    seq: &SequenceParams,
    init: &TissueParams,
    bounds: &FitBounds,
) -> Result<FitResult> {
    seq.validate()?;
    check_init(init, bounds)?;
    if signal.len() != seq.n_echoes {
        return Err(Error::dims("fit signal", seq.n_echoes, signal.len()));
    }
    let model = Model { seq, basis: None, t1: init.t1 };
    Ok(fit_voxel(&model, signal, init, bounds, None))
}

/// Fits `α ≈ ρ Φ_K^H f(T2)` directly on subspace coefficients.
pub fn fit_voxel_subspace(
    alpha: &[C64],
    basis: &SubspaceBasis,
    seq: &SequenceParams,
    init: &TissueParams,
    bounds: &FitBounds,
) -> Result<FitResult> {
    seq.validate()?;
    check_init(init, bounds)?;
    if basis.n_echoes() != seq.n_echoes {
        return Err(Error::dims("fit basis", seq.n_echoes, basis.n_echoes()));
    }
    if alpha.len() != basis.rank() {
        return Err(Error::dims("fit coefficients", basis.rank(), alpha.len()));
    }
    let model = Model { seq, basis: Some(basis), t1: init.t1 };
    Ok(fit_voxel(&model, alpha, init, bounds, None))
}

/// Unit-norm simulated evolutions for grid-search matching.
#[derive(Clone, Debug)]
pub struct Dictionary {
    /// `T × D`, unit columns.
    pub atoms: DMatrix<C64>,
    /// Generating parameters (ρ = 1).
    pub params: Vec<TissueParams>,
    /// 2-norm of each evolution before normalization.
    pub norms: Vec<f64>,
    /// `Φ_K^H · atoms`, columns normalized.
    pub compressed: Option<DMatrix<C64>>,
    /// Norms of the compressed columns before normalization.
    pub compressed_norms: Vec<f64>,
}

impl Dictionary {
    pub fn build(tissues: &[TissueParams], seq: &SequenceParams) -> Result<Self> {
        seq.validate()?;
        if tissues.is_empty() {
            return Err(Error::invalid("dictionary needs at least one atom"));
        }
        for t in tissues {
            t.validate()?;
        }
        let params: Vec<TissueParams> = tissues
            .iter()
            .map(|t| TissueParams { rho: C64::new(1.0, 0.0), ..*t })
            .collect();
        let cols: Vec<Vec<C64>> = params.par_iter().map(|t| simulate_unchecked(t, seq)).collect();
        let mut atoms = DMatrix::zeros(seq.n_echoes, params.len());
        let mut norms = Vec::with_capacity(params.len());
        for (d, col) in cols.iter().enumerate() {
            let n = energy(col).sqrt();
            if n == 0.0 {
                return Err(Error::invalid(format!("dictionary atom {d} has zero signal")));
            }
            norms.push(n);
            for (i, v) in col.iter().enumerate() {
                atoms[(i, d)] = v / n;
            }
        }
        Ok(Self {
            atoms,
            params,
            norms,
            compressed: None,
            compressed_norms: Vec::new(),
        })
    }

    /// Regular T2 grid `lo, lo+step, …, ≤ hi` at fixed T1 and η.
    pub fn t2_grid(t1: f64, eta: f64, lo: f64, hi: f64, step: f64, seq: &SequenceParams) -> Result<Self> {
        if !(step > 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("T2 grid needs 0 < lo <= hi and step > 0"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        let tissues: Vec<TissueParams> = (0..n)
            .map(|j| TissueParams::new(t1, lo + step * j as f64).with_eta(eta))
            .collect();
        Self::build(&tissues, seq)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds the normalized coefficient-space atoms.
    pub fn compress(mut self, basis: &SubspaceBasis) -> Result<Self> {
        if basis.n_echoes() != self.atoms.nrows() {
            return Err(Error::dims("dictionary basis", self.atoms.nrows(), basis.n_echoes()));
        }
        let mut c = basis.phi_k.adjoint() * &self.atoms;
        let mut norms = Vec::with_capacity(c.ncols());
        for (d, mut col) in c.column_iter_mut().enumerate() {
            let n = col.norm();
            if n == 0.0 {
                return Err(Error::invalid(format!("atom {d} vanishes in the subspace")));
            }
            col /= C64::from(n);
            norms.push(n);
        }
        self.compressed = Some(c);
        self.compressed_norms = norms;
        Ok(self)
    }
}

/// Picks the atom maximizing `|⟨atom, x⟩|`, lowest index on ties.
///
/// `x` may be an echo-domain signal (length T) or coefficients (length K,
/// requires compressed atoms). The returned `rho` is `⟨atom, x⟩` for the
/// unit-norm atom.
pub fn dictionary_match(x: &[C64], dict: &Dictionary) -> Result<FitResult> {
    let atoms = if x.len() == dict.atoms.nrows() {
        &dict.atoms
    } else {
        match &dict.compressed {
            Some(c) if c.nrows() == x.len() => c,
            Some(c) => return Err(Error::dims("dictionary match", c.nrows(), x.len())),
            None => {
                return Err(Error::dims("dictionary match", dict.atoms.nrows(), x.len()));
            }
        }
    };
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_corr = C64::new(0.0, 0.0);
    for (d, col) in atoms.column_iter().enumerate() {
        let corr: C64 = col.iter().zip(x).map(|(a, v)| a.conj() * v).sum();
        let score = corr.norm();
        if score > best_score {
            best = d;
            best_score = score;
            best_corr = corr;
        }
    }
    let p = dict.params[best];
    Ok(FitResult {
        rho: best_corr,
        t2: p.t2,
        t1: p.t1,
        eta: p.eta,
        residual: 0.5 * (energy(x) - best_corr.norm_sqr()).max(0.0),
        converged: true,
        defined: true,
        atom: Some(best),
    })
}

#[derive(Clone, Copy, Debug)]
pub enum FitMethod<'a> {
    /// Variable-projection least squares.
    Nlls,
    Dictionary(&'a Dictionary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitMaps {
    /// Physical density (scaled so that `x ≈ ρ f`).
    pub rho: Array2<C64>,
    /// NaN where the fit is undefined or skipped.
    pub t2: Array2<f64>,
    pub residual: Array2<f64>,
    /// Voxels whose fit is undefined or did not converge.
    pub failed: Array2<bool>,
}

/// Fits every voxel of a `T`-frame image stack, or a `K`-frame coefficient
/// stack when `basis` is given. Voxels whose signal energy is at or below
/// `min_energy` are skipped and marked failed.
pub fn fit_map(
    stack: &Array3<C64>,
    basis: Option<&SubspaceBasis>,
    seq: &SequenceParams,
    method: FitMethod<'_>,
    init: &TissueParams,
    bounds: &FitBounds,
    min_energy: f64,
) -> Result<FitMaps> {
    seq.validate()?;
    check_init(init, bounds)?;
    let (frames, nx, ny) = stack.dim();
    let expected = basis.map_or(seq.n_echoes, |b| b.rank());
    if frames != expected {
        return Err(Error::dims("fit_map frames", expected, frames));
    }
    if let Some(b) = basis {
        if b.n_echoes() != seq.n_echoes {
            return Err(Error::dims("fit_map basis", seq.n_echoes, b.n_echoes()));
        }
    }
    if let FitMethod::Dictionary(d) = method {
        if basis.is_some() && d.compressed.as_ref().map(|c| c.nrows()) != Some(frames) {
            return Err(Error::invalid("dictionary lacks compressed atoms for this basis"));
        }
        if basis.is_none() && d.atoms.nrows() != frames {
            return Err(Error::dims("fit_map dictionary", d.atoms.nrows(), frames));
        }
    }
    let model = Model { seq, basis, t1: init.t1 };
    let grid = match (method, bounds.eta) {
        (FitMethod::Nlls, None) => Some(CoarseGrid::new(&model, init.eta, bounds.t2)),
        _ => None,
    };

    let results: Vec<Option<FitResult>> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let (ix, iy) = (idx / ny, idx % ny);
            let x: Vec<C64> = (0..frames).map(|i| stack[(i, ix, iy)]).collect();
            if energy(&x) <= min_energy {
                return Ok(None);
            }
            let r = match method {
                FitMethod::Nlls => fit_voxel(&model, &x, init, bounds, grid.as_ref()),
                FitMethod::Dictionary(d) => {
                    let mut r = dictionary_match(&x, d)?;
                    let a = r.atom.unwrap_or(0);
                    let scale = match basis {
                        Some(_) => d.compressed_norms[a] * d.norms[a],
                        None => d.norms[a],
                    };
                    r.rho /= scale;
                    r
                }
            };
            Ok(Some(r))
        })
        .collect::<Result<_>>()?;

    let mut maps = FitMaps {
        rho: Array2::zeros((nx, ny)),
        t2: Array2::from_elem((nx, ny), f64::NAN),
        residual: Array2::zeros((nx, ny)),
        failed: Array2::from_elem((nx, ny), true),
    };
    for (idx, r) in results.iter().enumerate() {
        let at = (idx / ny, idx % ny);
        if let Some(r) = r {
            maps.rho[at] = r.rho;
            maps.t2[at] = r.t2;
            maps.residual[at] = r.residual;
            maps.failed[at] = !(r.defined && r.converged);
        }
    }
    Ok(maps)
}
