//! Iterative reconstruction.
//!
//! All convex solvers work on the normal operator `A^H A`. With a subspace
//! basis on the encoder the normal operator is applied through the
//! precomputed k-space kernel, so iterations never touch the `T` echo
//! images.

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoding::{inner, norm_sq, Encoder, SamplingMasks, SensitivityMaps};
use crate::error::{Error, Result};
use crate::spin_sim::{simulate_unchecked, SequenceParams, TissueParams, C64, REL_STEP};
use crate::subspace::SubspaceBasis;
use crate::wavelet::Transform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    /// Use this Lipschitz constant for `A^H A`.
    Fixed(f64),
    /// Estimate the Lipschitz constant by power iteration.
    PowerIteration,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// CG: relative residual. FISTA: relative objective change.
    pub tolerance: f64,
    pub lambda: f64,
    pub mu: f64,
    pub step_rule: StepRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-8,
            lambda: 0.0,
            mu: 0.0,
            step_rule: StepRule::PowerIteration,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::invalid(
                "solver needs tolerance > 0 and nonnegative lambda, mu",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    /// Coefficient images (`K` frames) or echo images (`T` frames).
    pub images: Array3<C64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Consecutive residual increases treated as divergence.
const DIVERGENCE_WINDOW: usize = 10;

fn axpy(y: &mut Array3<C64>, a: C64, x: &Array3<C64>) {
    Zip::from(y).and(x).for_each(|yi, &xi| *yi += a * xi);
}

/// Conjugate gradient on `N x = b` for Hermitian PSD `N`. The objective
/// recorded is `½x^H N x − Re(x^H b) + offset`.
fn conjugate_gradient<F>(
    normal: F,
    b: &Array3<C64>,
    offset: f64,
    max_iters: usize,
    tolerance: f64,
) -> Result<ReconResult>
where
    F: Fn(&Array3<C64>) -> Result<Array3<C64>>,
{
    let mut x = Array3::zeros(b.dim());
    let b_norm = norm_sq(b.iter()).sqrt();
    let mut trace = vec![offset];
    if b_norm == 0.0 {
        return Ok(ReconResult {
            images: x,
            objective_trace: trace,
            iterations: 0,
            converged: true,
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = norm_sq(r.iter());
    let mut rising = 0;
    let mut prev = rr.sqrt();
    for it in 1..=max_iters {
        let np = normal(&p)?;
        let pnp = inner(p.iter(), np.iter()).re;
        if !(pnp > 0.0) {
            if rr.sqrt() <= tolerance * b_norm {
                break;
            }
            return Err(Error::Singular(format!(
                "normal operator not positive along search direction (p^H N p = {pnp:e})"
            )));
        }
        let step = rr / pnp;
        axpy(&mut x, C64::from(step), &p);
        axpy(&mut r, C64::from(-step), &np);
        let rr_new = norm_sq(r.iter());
        let objective =
            offset - 0.5 * inner(x.iter(), b.iter()).re - 0.5 * inner(x.iter(), r.iter()).re;
        if !objective.is_finite() || !rr_new.is_finite() {
            return Err(Error::NonFinite(format!("CG iteration {it}")));
        }
        trace.push(objective);

        let res = rr_new.sqrt();
        rising = if res > prev { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Divergence {
                iteration: it,
                residual: res / b_norm,
            });
        }
        prev = res;
        if res <= tolerance * b_norm {
            return Ok(ReconResult {
                images: x,
                objective_trace: trace,
                iterations: it,
                converged: true,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p.zip_mut_with(&r, |pi, &ri| *pi = ri + beta * *pi);
    }
    let iterations = trace.len() - 1;
    Ok(ReconResult {
        images: x,
        objective_trace: trace,
        iterations,
        converged: false,
    })
}

/// Normal operator of the encoder: kernel path with a basis, masked
/// k-space path without.
pub(crate) enum NormalOp<'a> {
    Kernel(&'a Encoder, crate::encoding::NormalKernel),
    Direct(&'a Encoder),
}

impl<'a> NormalOp<'a> {
    pub(crate) fn new(enc: &'a Encoder) -> Result<Self> {
        Ok(match enc.basis() {
            Some(_) => NormalOp::Kernel(enc, enc.build_normal_kernel()?),
            None => NormalOp::Direct(enc),
        })
    }

    pub(crate) fn apply(&self, x: &Array3<C64>) -> Result<Array3<C64>> {
        match self {
            NormalOp::Kernel(enc, k) => k.apply(enc, x),
            NormalOp::Direct(enc) => enc.normal(x),
        }
    }
}

/// Least squares `(A^H A + λI) x = A^H y` by conjugate gradient.
pub fn cg_solve(enc: &Encoder, y: &Array1<C64>, cfg: &SolverConfig) -> Result<ReconResult> {
    cfg.validate()?;
    let b = enc.adjoint(y)?;
    let op = NormalOp::new(enc)?;
    let lambda = cfg.lambda;
    conjugate_gradient(
        |x| {
            let mut out = op.apply(x)?;
            if lambda > 0.0 {
                axpy(&mut out, C64::from(lambda), x);
            }
            Ok(out)
        },
        &b,
        0.5 * norm_sq(y.iter()),
        cfg.max_iters,
        cfg.tolerance,
    )
}

/// Penalized subspace reconstruction
/// `min ½‖y − Ax‖² + (μ/2)‖x − Φ_KΦ_K^H x‖²` over the full echo stack.
pub fn mocco_solve(
    enc: &Encoder,
    basis: &SubspaceBasis,
    y: &Array1<C64>,
    cfg: &SolverConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    if enc.basis().is_some() {
        return Err(Error::invalid("mocco_solve expects an encoder without a basis"));
    }
    if basis.n_echoes() != enc.n_echoes() {
        return Err(Error::dims("mocco basis", enc.n_echoes(), basis.n_echoes()));
    }
    let b = enc.adjoint(y)?;
    let mu = cfg.mu;
    conjugate_gradient(
        |x| {
            let mut out = enc.normal(x)?;
            if mu > 0.0 {
                let outside = x - &project_onto_subspace(basis, x);
                axpy(&mut out, C64::from(mu), &outside);
            }
            Ok(out)
        },
        &b,
        0.5 * norm_sq(y.iter()),
        cfg.max_iters,
        cfg.tolerance,
    )
}

/// `Φ_KΦ_K^H x` applied voxel-wise to a `T`-frame stack.
pub fn project_onto_subspace(basis: &SubspaceBasis, x: &Array3<C64>) -> Array3<C64> {
    back_project(basis, &coefficients(basis, x))
}

/// `α = Φ_K^H x` for a `T`-frame stack.
pub fn coefficients(basis: &SubspaceBasis, x: &Array3<C64>) -> Array3<C64> {
    let (_, nx, ny) = x.dim();
    let mut out = Array3::zeros((basis.rank(), nx, ny));
    for (k, mut frame) in out.outer_iter_mut().enumerate() {
        for (i, e) in x.outer_iter().enumerate() {
            let w = basis.phi_k[(i, k)].conj();
            Zip::from(&mut frame).and(&e).for_each(|a, &v| *a += w * v);
        }
    }
    out
}

/// `x̂ = Φ_K α` for a `K`-frame stack.
pub fn back_project(basis: &SubspaceBasis, alpha: &Array3<C64>) -> Array3<C64> {
    let (_, nx, ny) = alpha.dim();
    let mut out = Array3::zeros((basis.n_echoes(), nx, ny));
    for (i, mut frame) in out.outer_iter_mut().enumerate() {
        for (k, a) in alpha.outer_iter().enumerate() {
            let w = basis.phi_k[(i, k)];
            Zip::from(&mut frame).and(&a).for_each(|o, &v| *o += w * v);
        }
    }
    out
}

/// ℓ1 regularizer in an orthonormal transform domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    L1Identity,
    L1Wavelet(Transform),
}

impl Regularizer {
    fn transform(&self) -> Transform {
        match self {
            Regularizer::L1Identity => Transform::Identity,
            Regularizer::L1Wavelet(t) => *t,
        }
    }

    /// `Σ_frames ‖W x‖₁`.
    pub fn norm(&self, x: &Array3<C64>) -> f64 {
        let w = self.transform();
        x.outer_iter()
            .map(|f| w.forward(&f.to_owned()).iter().map(|c| c.norm()).sum::<f64>())
            .sum()
    }

    /// Proximal map of `τ‖W·‖₁`: complex soft-thresholding of coefficients.
    pub fn prox(&self, x: &Array3<C64>, tau: f64) -> Array3<C64> {
        let w = self.transform();
        let mut out = Array3::zeros(x.dim());
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let mut c = w.forward(&src.to_owned());
            c.mapv_inplace(|v| soft_threshold(v, tau));
            dst.assign(&w.inverse(&c));
        }
        out
    }
}

pub fn soft_threshold(v: C64, tau: f64) -> C64 {
    let m = v.norm();
    if m <= tau {
        C64::new(0.0, 0.0)
    } else {
        v * ((m - tau) / m)
    }
}

/// Power-iteration iterations for the Lipschitz estimate.
const POWER_ITERS: usize = 60;
/// Safety margin on the power-iteration estimate (it approaches from below).
const LIPSCHITZ_MARGIN: f64 = 1.05;

pub(crate) fn estimate_lipschitz(op: &NormalOp<'_>, shape: (usize, usize, usize)) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Array3::from_shape_fn(shape, |_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let n = norm_sq(v.iter()).sqrt();
        if n == 0.0 {
            break;
        }
        v.mapv_inplace(|c| c / n);
        let w = op.apply(&v)?;
        est = inner(v.iter(), w.iter()).re;
        v = w;
    }
    let l = est * LIPSCHITZ_MARGIN;
    if !l.is_finite() {
        return Err(Error::NonFinite("Lipschitz estimate".into()));
    }
    Ok(l)
}

/// Proximal gradient with momentum for
/// `min ½‖y − Ax‖² + λ‖W x‖₁`.
///
/// The momentum restarts whenever the objective would increase, and the
/// restarted step is then a plain proximal-gradient step, so the recorded
/// objective is nonincreasing. If even that step increases the objective
/// the Lipschitz constant is doubled.
pub fn fista_solve(
    enc: &Encoder,
    y: &Array1<C64>,
    regularizer: Regularizer,
    cfg: &SolverConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    let (_, nx, ny) = enc.domain_shape();
    regularizer.transform().check(nx, ny)?;
    let op = NormalOp::new(enc)?;
    let b = enc.adjoint(y)?;
    let offset = 0.5 * norm_sq(y.iter());
    let lambda = cfg.lambda;

    let mut lip = match cfg.step_rule {
        StepRule::Fixed(l) => l,
        StepRule::PowerIteration => estimate_lipschitz(&op, b.dim())?,
    };
    if !(lip.is_finite()) {
        return Err(Error::NonFinite("step rule produced a non-finite Lipschitz constant".into()));
    }
    if lip <= 0.0 {
        // A^H A = 0: nothing is observed, zero is optimal
        return Ok(ReconResult {
            images: Array3::zeros(b.dim()),
            objective_trace: vec![offset],
            iterations: 0,
            converged: true,
        });
    }

    let objective = |x: &Array3<C64>, nx_: &Array3<C64>| -> f64 {
        0.5 * inner(x.iter(), nx_.iter()).re - inner(x.iter(), b.iter()).re
            + offset
            + lambda * regularizer.norm(x)
    };
    let prox_step = |z: &Array3<C64>, nz: &Array3<C64>, l: f64| -> Array3<C64> {
        let mut g = nz - &b;
        g.mapv_inplace(|v| v / l);
        regularizer.prox(&(z - &g), lambda / l)
    };

    let mut x = Array3::<C64>::zeros(b.dim());
    let mut nx_ = Array3::<C64>::zeros(b.dim());
    let mut f = offset;
    let mut z = x.clone();
    let mut nz = nx_.clone();
    let mut t = 1.0f64;
    let mut trace = vec![f];
    // ½‖y‖² sets the round-off floor of the expanded objective
    let floor = 1e-12 * offset.max(f64::MIN_POSITIVE);

    for it in 1..=cfg.max_iters {
        let mut x_new = prox_step(&z, &nz, lip);
        let mut n_new = op.apply(&x_new)?;
        let mut f_new = objective(&x_new, &n_new);
        if f_new > f {
            t = 1.0;
            let mut tries = 0;
            loop {
                x_new = prox_step(&x, &nx_, lip);
                n_new = op.apply(&x_new)?;
                f_new = objective(&x_new, &n_new);
                if f_new <= f {
                    break;
                }
                if f_new <= f + floor {
                    // stalled at round-off level
                    return Ok(ReconResult {
                        images: x,
                        objective_trace: trace,
                        iterations: it - 1,
                        converged: true,
                    });
                }
                tries += 1;
                if tries > 40 {
                    return Err(Error::NonConvergence {
                        iterations: it,
                        residual: f_new,
                    });
                }
                lip *= 2.0;
            }
        }
        if !f_new.is_finite() {
            return Err(Error::NonFinite(format!("FISTA iteration {it}")));
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = C64::from((t - 1.0) / t_new);
        z = &x_new + &((&x_new - &x).mapv(|v| v * beta));
        nz = &n_new + &((&n_new - &nx_).mapv(|v| v * beta));
        let change = (f - f_new).abs() / f.abs().max(floor);
        x = x_new;
        nx_ = n_new;
        f = f_new;
        t = t_new;
        trace.push(f);
        if change < cfg.tolerance {
            return Ok(ReconResult {
                images: x,
                objective_trace: trace,
                iterations: it,
                converged: true,
            });
        }
    }
    let iterations = trace.len() - 1;
    Ok(ReconResult {
        images: x,
        objective_trace: trace,
        iterations,
        converged: false,
    })
}

/// Proton-density and T2 maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMaps {
    pub rho: Array2<C64>,
    pub t2: Array2<f64>,
}

/// Settings for the nonlinear model-based solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelBasedConfig {
    /// Held fixed (ms).
    pub t1: f64,
    /// Held fixed.
    pub eta: f64,
    /// Box on T2 (ms), enforced by projection.
    pub t2_bounds: (f64, f64),
    /// Gauss–Newton iterations.
    pub max_iters: usize,
    /// Stop on relative cost decrease below this.
    pub tolerance: f64,
    /// Inner CG iterations for each Gauss–Newton system.
    pub cg_iters: usize,
    /// Levenberg damping relative to the per-voxel diagonal.
    pub damping: f64,
}

impl Default for ModelBasedConfig {
    fn default() -> Self {
        Self {
            t1: 1000.0,
            eta: 1.0,
            t2_bounds: (5.0, 2000.0),
            max_iters: 30,
            tolerance: 1e-10,
            cg_iters: 50,
            damping: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBasedResult {
    pub maps: ParamMaps,
    /// `½‖A x(ρ, T2) − y‖²` at the start and after every accepted step.
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Signal and T2-derivative of one voxel's evolution at unit density.
fn voxel_model(t2: f64, cfg: &ModelBasedConfig, seq: &SequenceParams) -> (Vec<C64>, Vec<C64>) {
    let tissue = TissueParams {
        rho: C64::new(1.0, 0.0),
        t1: cfg.t1,
        t2,
        eta: cfg.eta,
    };
    let f = simulate_unchecked(&tissue, seq);
    let h = REL_STEP * t2;
    let up = simulate_unchecked(&TissueParams { t2: t2 + h, ..tissue }, seq);
    let dn = simulate_unchecked(&TissueParams { t2: t2 - h, ..tissue }, seq);
    let g = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    (f, g)
}

/// Per-voxel evolutions `f` and `∂f/∂T2`, each `(T, nx, ny)`.
fn model_stacks(
    t2: &Array2<f64>,
    cfg: &ModelBasedConfig,
    seq: &SequenceParams,
) -> (Array3<C64>, Array3<C64>) {
    let (nx, ny) = t2.dim();
    let t = seq.n_echoes;
    let voxels: Vec<(Vec<C64>, Vec<C64>)> = t2
        .as_slice_memory_order()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| t2.iter().copied().collect())
        .par_iter()
        .map(|&v| voxel_model(v, cfg, seq))
        .collect();
    let mut f = Array3::zeros((t, nx, ny));
    let mut g = Array3::zeros((t, nx, ny));
    for (idx, (fv, gv)) in voxels.iter().enumerate() {
        let (ix, iy) = (idx / ny, idx % ny);
        for i in 0..t {
            f[(i, ix, iy)] = fv[i];
            g[(i, ix, iy)] = gv[i];
        }
    }
    (f, g)
}

fn synthesize(rho: &Array2<C64>, f: &Array3<C64>) -> Array3<C64> {
    let mut x = f.clone();
    for mut frame in x.outer_iter_mut() {
        frame *= rho;
    }
    x
}

/// Real parameter vector per voxel: `(Re ρ, Im ρ, T2)`.
type Params3 = Array3<f64>;

/// `J v`: image-domain perturbation for a parameter step.
fn jac_apply(v: &Params3, rho: &Array2<C64>, f: &Array3<C64>, g: &Array3<C64>) -> Array3<C64> {
    let (t, nx, ny) = f.dim();
    Array3::from_shape_fn((t, nx, ny), |(i, a, b)| {
        let drho = C64::new(v[(0, a, b)], v[(1, a, b)]);
        f[(i, a, b)] * drho + rho[(a, b)] * g[(i, a, b)] * v[(2, a, b)]
    })
}

/// `J^T z` for an image-domain vector `z` (already `A^H`-applied).
fn jac_adjoint(z: &Array3<C64>, rho: &Array2<C64>, f: &Array3<C64>, g: &Array3<C64>) -> Params3 {
    let (_, nx, ny) = f.dim();
    let mut out = Array3::zeros((3, nx, ny));
    for a in 0..nx {
        for b in 0..ny {
            let mut sf = C64::new(0.0, 0.0);
            let mut sg = C64::new(0.0, 0.0);
            for ((fi, gi), zi) in f
                .slice(ndarray::s![.., a, b])
                .iter()
                .zip(g.slice(ndarray::s![.., a, b]).iter())
                .zip(z.slice(ndarray::s![.., a, b]).iter())
            {
                sf += fi.conj() * zi;
                sg += gi.conj() * zi;
            }
            out[(0, a, b)] = sf.re;
            out[(1, a, b)] = sf.im;
            out[(2, a, b)] = (rho[(a, b)].conj() * sg).re;
        }
    }
    out
}

/// Per-voxel 3×3 blocks of `Re(D^H D)` (encoding ignored), inverted, with
/// damping. Used as a block-Jacobi preconditioner.
fn block_preconditioner(rho: &Array2<C64>, f: &Array3<C64>, g: &Array3<C64>, damping: f64) -> Vec<nalgebra::Matrix3<f64>> {
    let (_, nx, ny) = f.dim();
    let mut blocks = Vec::with_capacity(nx * ny);
    for a in 0..nx {
        for b in 0..ny {
            let fv = f.slice(ndarray::s![.., a, b]);
            let gv = g.slice(ndarray::s![.., a, b]);
            let r = rho[(a, b)];
            let ff: f64 = fv.iter().map(|v| v.norm_sqr()).sum();
            let fg: C64 = fv.iter().zip(gv.iter()).map(|(x, y)| x.conj() * r * y).sum();
            let gg: f64 = gv.iter().map(|v| v.norm_sqr()).sum::<f64>() * r.norm_sqr();
            // columns: f, i·f, ρg
            let mut m = nalgebra::Matrix3::new(
                ff, 0.0, fg.re,
                0.0, ff, fg.im,
                fg.re, fg.im, gg,
            );
            let scale = ff.max(gg).max(1e-300);
            for d in 0..3 {
                m[(d, d)] += damping * m[(d, d)] + 1e-12 * scale;
            }
            blocks.push(m.try_inverse().unwrap_or_else(nalgebra::Matrix3::zeros));
        }
    }
    blocks
}

fn apply_blocks(blocks: &[nalgebra::Matrix3<f64>], v: &Params3) -> Params3 {
    let (_, nx, ny) = v.dim();
    let mut out = Array3::zeros(v.dim());
    for a in 0..nx {
        for b in 0..ny {
            let vv = nalgebra::Vector3::new(v[(0, a, b)], v[(1, a, b)], v[(2, a, b)]);
            let w = blocks[a * ny + b] * vv;
            for d in 0..3 {
                out[(d, a, b)] = w[d];
            }
        }
    }
    out
}

fn dot(a: &Params3, b: &Params3) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Gradient reduction, relative to the start, that makes a stalled line
/// search count as converged.
const STALL_GRADIENT: f64 = 1e-6;

/// Gauss–Newton on `(ρ, T2)` through the full encoding chain
/// `y ≈ A[ρ(r) f(T2(r))]`, with T1 and η held fixed.
///
/// Each Gauss–Newton system is solved by block-Jacobi preconditioned CG; a
/// step is accepted only if it lowers the residual (halving up to 20
/// times), and T2 is projected onto its box.
pub fn model_based_solve(
    masks: &SamplingMasks,
    maps: Option<&SensitivityMaps>,
    seq: &SequenceParams,
    y: &Array1<C64>,
    init: &ParamMaps,
    cfg: &ModelBasedConfig,
) -> Result<ModelBasedResult> {
    seq.validate()?;
    let (lo, hi) = cfg.t2_bounds;
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::invalid("T2 bounds must satisfy 0 < lo < hi"));
    }
    if init.rho.dim() != masks.dims() || init.t2.dim() != masks.dims() {
        return Err(Error::dims("model-based init", masks.dims(), init.rho.dim()));
    }
    if masks.n_echoes() != seq.n_echoes {
        return Err(Error::dims("model-based masks", seq.n_echoes, masks.n_echoes()));
    }
    let enc = Encoder::new(masks.clone(), maps.cloned(), None)?;
    let mut rho = init.rho.clone();
    let mut t2 = init.t2.mapv(|v| v.clamp(lo, hi));

    let cost_of = |rho: &Array2<C64>, f: &Array3<C64>| -> Result<(f64, Array1<C64>)> {
        let r = enc.forward(&synthesize(rho, f))? - y;
        let c = 0.5 * norm_sq(r.iter());
        if !c.is_finite() {
            return Err(Error::NonFinite("model-based residual".into()));
        }
        Ok((c, r))
    };

    let (mut f, mut g) = model_stacks(&t2, cfg, seq);
    let (mut cost, mut resid) = cost_of(&rho, &f)?;
    let mut trace = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad0 = 0.0;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let grad = jac_adjoint(&enc.adjoint(&resid)?, &rho, &f, &g);
        let grad_norm = dot(&grad, &grad).sqrt();
        if it == 1 {
            grad0 = grad_norm;
        }
        if cost == 0.0 || grad_norm == 0.0 {
            converged = true;
            break;
        }

        // Solve (J^T J + damping) δ = −grad by preconditioned CG.
        let precond = block_preconditioner(&rho, &f, &g, cfg.damping);
        let jtj = |v: &Params3| -> Result<Params3> {
            let w = enc.normal(&jac_apply(v, &rho, &f, &g))?;
            let mut out = jac_adjoint(&w, &rho, &f, &g);
            // Levenberg damping on the block diagonal
            let d = apply_blocks_diag(&rho, &f, &g, v, cfg.damping);
            out += &d;
            Ok(out)
        };
        let rhs = grad.mapv(|v| -v);
        let mut delta = Array3::<f64>::zeros(rhs.dim());
        let mut r = rhs.clone();
        let mut z = apply_blocks(&precond, &r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let rhs_norm = dot(&rhs, &rhs).sqrt();
        for _ in 0..cfg.cg_iters {
            let ap = jtj(&p)?;
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let a = rz / pap;
            delta.scaled_add(a, &p);
            r.scaled_add(-a, &ap);
            if dot(&r, &r).sqrt() < 1e-12 * rhs_norm {
                break;
            }
            z = apply_blocks(&precond, &r);
            let rz_new = dot(&r, &z);
            p = &z + &(p * (rz_new / rz));
            rz = rz_new;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let cand_rho = Array2::from_shape_fn(rho.dim(), |(a, b)| {
                rho[(a, b)] + C64::new(delta[(0, a, b)], delta[(1, a, b)]) * step
            });
            let cand_t2 = Array2::from_shape_fn(t2.dim(), |(a, b)| {
                (t2[(a, b)] + step * delta[(2, a, b)]).clamp(lo, hi)
            });
            let (cf, cg) = model_stacks(&cand_t2, cfg, seq);
            let (c, r) = cost_of(&cand_rho, &cf)?;
            if c < cost {
                accepted = Some((cand_rho, cand_t2, cf, cg, c, r));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            // no descent along the Gauss–Newton direction: a minimum only
            // if the gradient has collapsed too
            None => {
                converged = grad_norm <= STALL_GRADIENT * grad0;
                break;
            }
            Some((nr, nt, nf, ng, c, r)) => {
                let decrease = (cost - c) / cost;
                rho = nr;
                t2 = nt;
                f = nf;
                g = ng;
                cost = c;
                resid = r;
                trace.push(cost);
                if decrease < cfg.tolerance {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(ModelBasedResult {
        maps: ParamMaps { rho, t2 },
        residual_trace: trace,
        iterations,
        converged,
    })
}

fn apply_blocks_diag(rho: &Array2<C64>, f: &Array3<C64>, g: &Array3<C64>, v: &Params3, damping: f64) -> Params3 {
    let mut out = Array3::zeros(v.dim());
    if damping == 0.0 {
        return out;
    }
    let (_, nx, ny) = v.dim();
    for a in 0..nx {
        for b in 0..ny {
            let ff: f64 = f.slice(ndarray::s![.., a, b]).iter().map(|x| x.norm_sqr()).sum();
            let gg: f64 = g.slice(ndarray::s![.., a, b]).iter().map(|x| x.norm_sqr()).sum::<f64>()
                * rho[(a, b)].norm_sqr();
            out[(0, a, b)] = damping * ff * v[(0, a, b)];
            out[(1, a, b)] = damping * ff * v[(1, a, b)];
            out[(2, a, b)] = damping * gg * v[(2, a, b)];
        }
    }
    out
}

/// Frame-wise normalized RMSE `‖a − b‖ / ‖b‖`.
pub fn nrmse(estimate: &Array3<C64>, truth: &Array3<C64>) -> f64 {
    let diff: f64 = estimate
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    (diff / norm_sq(truth.iter())).sqrt()
}

/// Sum of `|x|²` over one axis-0 frame.
pub fn frame_energy(x: &Array3<C64>, frame: usize) -> f64 {
    norm_sq(x.index_axis(Axis(0), frame).iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::SamplingMasks;
    use nalgebra::DMatrix;

    fn random_stack(shape: (usize, usize, usize), seed: u64) -> Array3<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_masks(t: usize, n: usize, p: f64, seed: u64) -> SamplingMasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SamplingMasks::new(Array3::from_shape_fn((t, n, n), |_| rng.gen_bool(p))).unwrap()
    }

    fn random_basis(t: usize, k: usize, seed: u64) -> SubspaceBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(t, k, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        SubspaceBasis::from_columns(m.qr().q()).unwrap()
    }

    #[test]
    fn identity_system_converges_immediately() {
        let enc = Encoder::new(SamplingMasks::fully_sampled(1, 8, 8), None, None).unwrap();
        let x = random_stack((1, 8, 8), 1);
        let y = enc.forward(&x).unwrap();
        let out = cg_solve(&enc, &y, &SolverConfig::default()).unwrap();
        assert!(out.iterations <= 2 && out.converged);
        assert!(nrmse(&out.images, &x) < 1e-8);
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let enc = Encoder::new(random_masks(4, 8, 0.5, 2), None, None).unwrap();
        let y = Array1::zeros(enc.n_measurements());
        let out = cg_solve(&enc, &y, &SolverConfig::default()).unwrap();
        assert!(out.images.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn cg_objective_is_monotone() {
        let basis = random_basis(6, 2, 3);
        let enc = Encoder::new(random_masks(6, 16, 0.5, 3), None, Some(basis)).unwrap();
        let y = enc.forward(&random_stack(enc.domain_shape(), 4)).unwrap()
            + random_stack((1, 1, enc.n_measurements()), 5).into_shape_with_order(enc.n_measurements()).unwrap() * C64::from(0.01);
        let cfg = SolverConfig { tolerance: 1e-12, max_iters: 200, ..SolverConfig::default() };
        let out = cg_solve(&enc, &y, &cfg).unwrap();
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs()));
    }

    #[test]
    fn huge_lambda_zeroes_the_image() {
        let enc = Encoder::new(random_masks(2, 8, 0.5, 6), None, None).unwrap();
        let y = enc.forward(&random_stack((2, 8, 8), 7)).unwrap();
        let aty = enc.adjoint(&y).unwrap();
        let max = aty.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let cfg = SolverConfig { lambda: 2.0 * max, ..SolverConfig::default() };
        let out = fista_solve(&enc, &y, Regularizer::L1Identity, &cfg).unwrap();
        assert!(out.images.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn fista_without_regularization_matches_cg() {
        let basis = random_basis(8, 2, 8);
        let enc = Encoder::new(random_masks(8, 8, 0.6, 8), None, Some(basis)).unwrap();
        let y = enc.forward(&random_stack(enc.domain_shape(), 9)).unwrap();
        let cg = cg_solve(&enc, &y, &SolverConfig { tolerance: 1e-12, ..SolverConfig::default() }).unwrap();
        let fista = fista_solve(
            &enc,
            &y,
            Regularizer::L1Wavelet(Transform::Haar { levels: 2 }),
            &SolverConfig { tolerance: 1e-14, max_iters: 3000, ..SolverConfig::default() },
        )
        .unwrap();
        assert!(nrmse(&fista.images, &cg.images) < 1e-4);
        assert!(fista.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mocco_with_zero_mu_is_plain_least_squares() {
        let basis = random_basis(4, 2, 10);
        let enc = Encoder::new(random_masks(4, 8, 0.7, 10), None, None).unwrap();
        let y = enc.forward(&random_stack((4, 8, 8), 11)).unwrap();
        let cfg = SolverConfig { tolerance: 1e-12, ..SolverConfig::default() };
        let a = mocco_solve(&enc, &basis, &y, &cfg).unwrap();
        let b = cg_solve(&enc, &y, &cfg).unwrap();
        assert!(nrmse(&a.images, &b.images) < 1e-9);
        let with_basis = enc.with_basis(Some(basis.clone())).unwrap();
        assert!(mocco_solve(&with_basis, &basis, &y, &cfg).is_err());
    }

    #[test]
    fn back_projection_is_consistent() {
        let basis = random_basis(7, 3, 12);
        let alpha = random_stack((3, 4, 5), 13);
        let again = coefficients(&basis, &back_project(&basis, &alpha));
        assert!(nrmse(&again, &alpha) < 1e-14);
    }

    #[test]
    fn bad_config_rejected() {
        let enc = Encoder::new(SamplingMasks::fully_sampled(1, 4, 4), None, None).unwrap();
        let y = Array1::zeros(16);
        let cfg = SolverConfig { tolerance: 0.0, ..SolverConfig::default() };
        assert!(cg_solve(&enc, &y, &cfg).is_err());
        let cfg = SolverConfig { lambda: -1.0, ..SolverConfig::default() };
        assert!(fista_solve(&enc, &y, Regularizer::L1Identity, &cfg).is_err());
    }

    /// Explicit matrix of `A` by probing unit vectors.
    fn dense_encoder(enc: &Encoder) -> DMatrix<C64> {
        let shape = enc.domain_shape();
        let n = shape.0 * shape.1 * shape.2;
        let mut a = DMatrix::zeros(enc.n_measurements(), n);
        for j in 0..n {
            let mut e = Array3::zeros(shape);
            e.as_slice_mut().unwrap()[j] = C64::new(1.0, 0.0);
            let col = enc.forward(&e).unwrap();
            for (i, v) in col.iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        a
    }

    /// Cyclic coordinate descent for the complex lasso.
    fn lasso_oracle(a: &DMatrix<C64>, y: &[C64], lambda: f64) -> Vec<C64> {
        let n = a.ncols();
        let mut x = vec![C64::new(0.0, 0.0); n];
        let mut r: Vec<C64> = y.to_vec();
        let col_sq: Vec<f64> = (0..n).map(|j| a.column(j).iter().map(|v| v.norm_sqr()).sum()).collect();
        for _ in 0..20000 {
            let mut moved = 0.0f64;
            for j in 0..n {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let corr: C64 = a.column(j).iter().zip(&r).map(|(aij, ri)| aij.conj() * ri).sum();
                let new = soft_threshold(x[j] + corr / col_sq[j], lambda / col_sq[j]);
                let d = new - x[j];
                if d.norm() > 0.0 {
                    for (ri, aij) in r.iter_mut().zip(a.column(j).iter()) {
                        *ri -= aij * d;
                    }
                    moved = moved.max(d.norm());
                    x[j] = new;
                }
            }
            if moved < 1e-14 {
                break;
            }
        }
        x
    }

    #[test]
    fn fista_matches_coordinate_descent_lasso() {
        let enc = Encoder::new(random_masks(2, 4, 0.5, 20), None, None).unwrap();
        let y = enc.forward(&random_stack((2, 4, 4), 21)).unwrap();
        let lambda = 0.05;
        let cfg = SolverConfig { lambda, tolerance: 1e-15, max_iters: 20000, ..SolverConfig::default() };
        let out = fista_solve(&enc, &y, Regularizer::L1Identity, &cfg).unwrap();
        let want = lasso_oracle(&dense_encoder(&enc), y.as_slice().unwrap(), lambda);
        let a = dense_encoder(&enc);
        let yv = nalgebra::DVector::from_column_slice(y.as_slice().unwrap());
        let obj = |x: &[C64]| {
            let r = &a * nalgebra::DVector::from_column_slice(x) - &yv;
            0.5 * r.norm_squared() + lambda * x.iter().map(|v| v.norm()).sum::<f64>()
        };
        // minimizers need not be unique here, the optimal value is
        let (got, best) = (obj(out.images.as_slice().unwrap()), obj(&want));
        assert!((got - best).abs() < 1e-10 * best, "{got} vs {best}");
    }

    #[test]
    fn fully_sampled_lasso_is_soft_thresholded_adjoint() {
        let enc = Encoder::new(SamplingMasks::fully_sampled(1, 8, 8), None, None).unwrap();
        let y = enc.forward(&random_stack((1, 8, 8), 24)).unwrap();
        let lambda = 0.3;
        let want = enc.adjoint(&y).unwrap().mapv(|v| soft_threshold(v, lambda));
        let cfg = SolverConfig { lambda, tolerance: 1e-14, ..SolverConfig::default() };
        let out = fista_solve(&enc, &y, Regularizer::L1Identity, &cfg).unwrap();
        assert!(nrmse(&out.images, &want) < 1e-8);
    }

    #[test]
    fn cg_matches_dense_normal_equations() {
        let basis = random_basis(5, 2, 22);
        let enc = Encoder::new(random_masks(5, 4, 0.6, 22), None, Some(basis)).unwrap();
        let y = enc.forward(&random_stack(enc.domain_shape(), 23)).unwrap()
            .mapv(|v| v * C64::new(1.0, 0.3));
        let lambda = 0.1;
        let a = dense_encoder(&enc);
        let yv = nalgebra::DVector::from_column_slice(y.as_slice().unwrap());
        let n = a.ncols();
        let lhs = a.adjoint() * &a + DMatrix::<C64>::identity(n, n) * C64::from(lambda);
        let want = lhs.lu().solve(&(a.adjoint() * yv)).unwrap();
        let cfg = SolverConfig { lambda, tolerance: 1e-13, ..SolverConfig::default() };
        let out = cg_solve(&enc, &y, &cfg).unwrap();
        for (g, w) in out.images.iter().zip(want.iter()) {
            assert!((g - w).norm() < 1e-9);
        }
    }

    fn t2_scene(n: usize) -> (Array2<C64>, Array2<f64>) {
        let rho = Array2::from_shape_fn((n, n), |(a, b)| C64::new(1.0 + 0.1 * a as f64, 0.05 * b as f64));
        let t2 = Array2::from_shape_fn((n, n), |(a, b)| 40.0 + 10.0 * (a + b) as f64);
        (rho, t2)
    }

    fn measure(masks: &SamplingMasks, seq: &SequenceParams, rho: &Array2<C64>, t2: &Array2<f64>, cfg: &ModelBasedConfig) -> Array1<C64> {
        let (f, _) = model_stacks(t2, cfg, seq);
        Encoder::new(masks.clone(), None, None).unwrap().forward(&synthesize(rho, &f)).unwrap()
    }

    #[test]
    fn model_based_recovers_t2_from_undersampled_data() {
        let seq = SequenceParams::constant(8, 10.0, 150.0);
        let masks = random_masks(8, 6, 0.6, 30);
        let cfg = ModelBasedConfig::default();
        let (rho, t2) = t2_scene(6);
        let y = measure(&masks, &seq, &rho, &t2, &cfg);
        let init = ParamMaps { rho: rho.clone(), t2: t2.mapv(|v| 1.5 * v) };
        let out = model_based_solve(&masks, None, &seq, &y, &init, &cfg).unwrap();
        let err = (&out.maps.t2 - &t2).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(err < 1e-3, "max T2 error {err}");
        assert!(out.residual_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn model_based_at_truth_does_not_move() {
        let seq = SequenceParams::constant(6, 10.0, 120.0);
        let masks = random_masks(6, 4, 0.5, 31);
        let cfg = ModelBasedConfig::default();
        let (rho, t2) = t2_scene(4);
        let y = measure(&masks, &seq, &rho, &t2, &cfg);
        let init = ParamMaps { rho: rho.clone(), t2: t2.clone() };
        let out = model_based_solve(&masks, None, &seq, &y, &init, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.maps, init);
    }

    #[test]
    fn model_based_rejects_bad_bounds() {
        let seq = SequenceParams::constant(4, 10.0, 180.0);
        let masks = SamplingMasks::fully_sampled(4, 2, 2);
        let (rho, t2) = t2_scene(2);
        let cfg = ModelBasedConfig { t2_bounds: (10.0, 5.0), ..ModelBasedConfig::default() };
        let y = Array1::zeros(masks.total());
        assert!(model_based_solve(&masks, None, &seq, &y, &ParamMaps { rho, t2 }, &cfg).is_err());
    }
}
