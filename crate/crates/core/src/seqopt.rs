//! Scan-parameter selection: Fisher information and Cramér–Rao bounds,
//! flip-angle optimization under an RF power proxy, min-max design,
//! contrast-optimal echo time and prospective flip design.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spin_sim::{
    signal_jacobian, simulate_unchecked, EchoTrain, Param, SequenceParams, TissueParams, C64,
    REL_STEP,
};

/// Real Fisher information `I = (2/σ²) Re(J^H J)` for complex circular
/// Gaussian noise of standard deviation `σ` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    pub param_order: Vec<Param>,
    pub sigma: f64,
}

pub fn fisher_info(
    tissue: &TissueParams,
    seq: &SequenceParams,
    sigma: f64,
    params: &[Param],
) -> Result<FisherInfo> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    if params.is_empty() {
        return Err(Error::invalid("no parameters selected"));
    }
    let j = signal_jacobian(tissue, seq, params)?;
    Ok(FisherInfo {
        matrix: information_from_jacobian(&j, sigma),
        param_order: params.to_vec(),
        sigma,
    })
}

/// `(2/σ²) Re(J^H J)`, symmetrized.
pub fn information_from_jacobian(j: &DMatrix<C64>, sigma: f64) -> DMatrix<f64> {
    let g = j.adjoint() * j;
    let p = g.nrows();
    let scale = 2.0 / (sigma * sigma);
    DMatrix::from_fn(p, p, |a, b| scale * 0.5 * (g[(a, b)].re + g[(b, a)].re))
}

/// `[I^{-1}]_pp`; a singular (non-identifiable) information matrix is an
/// error.
pub fn crlb(info: &FisherInfo, param: Param) -> Result<f64> {
    let p = info
        .param_order
        .iter()
        .position(|&q| q == param)
        .ok_or_else(|| Error::invalid(format!("{} not among the Fisher parameters", param.name())))?;
    let inv = invert_information(&info.matrix)?;
    Ok(inv[(p, p)])
}

fn invert_information(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Singular(format!(
            "Fisher information not invertible (eigenvalues in [{min:e}, {max:e}]): parameters not identifiable"
        )));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("Fisher information not positive definite".into()))
}

/// Upper limit on `Σ α_i²` (radians²), a proxy for RF energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerBudget {
    pub limit: f64,
}

impl PowerBudget {
    pub fn new(limit: f64) -> Result<Self> {
        if !(limit > 0.0 && limit.is_finite()) {
            return Err(Error::invalid("power limit must be positive"));
        }
        Ok(Self { limit })
    }

    /// Budget spent by `T` pulses of `flip_deg`.
    pub fn of_constant(n_echoes: usize, flip_deg: f64) -> Result<Self> {
        Self::new(n_echoes as f64 * flip_deg.to_radians().powi(2))
    }

    pub fn usage(flips_deg: &[f64]) -> f64 {
        flips_deg.iter().map(|a| a.to_radians().powi(2)).sum()
    }

    /// Constant flip (degrees) that spends the whole budget, capped at 180°.
    pub fn equal_power_flip(&self, n_echoes: usize) -> f64 {
        (self.limit / n_echoes as f64).sqrt().to_degrees().min(180.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipOptConfig {
    pub max_iters: usize,
    /// Lower flip bound (degrees).
    pub alpha_min_deg: f64,
    /// First trial step along the normalized gradient (degrees).
    pub initial_step_deg: f64,
}

impl Default for FlipOptConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            alpha_min_deg: 20.0,
            initial_step_deg: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipSchedule {
    pub flips_deg: Vec<f64>,
    /// Target Fisher diagonal (σ = 1) after every accepted step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Fisher diagonal for `target` at σ = 1, tolerant of flips outside
/// [0°, 180°] so finite differences can straddle the box.
fn target_information(tissue: &TissueParams, seq: &SequenceParams, target: Param) -> Result<f64> {
    let column: Vec<C64> = match target {
        Param::Rho => simulate_unchecked(&tissue.with_rho(C64::new(1.0, 0.0)), seq),
        Param::T1 | Param::T2 | Param::Eta => {
            let bump = |d: f64| {
                let mut t = *tissue;
                match target {
                    Param::T1 => t.t1 += d,
                    Param::T2 => t.t2 += d,
                    _ => t.eta += d,
                }
                t
            };
            let value = match target {
                Param::T1 => tissue.t1,
                Param::T2 => tissue.t2,
                _ => tissue.eta,
            };
            let h = REL_STEP * value;
            let up = simulate_unchecked(&bump(h), seq);
            let dn = simulate_unchecked(&bump(-h), seq);
            up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        }
        Param::Flip(_) => return Err(Error::invalid("flip angles cannot be the optimization target")),
    };
    Ok(2.0 * column.iter().map(|v| v.norm_sqr()).sum::<f64>())
}

/// Clip to `[lo, 180°]`, then rescale the unclipped flips onto the budget.
/// Flips pushed under `lo` by the rescale are pinned there and the rest
/// rescaled again.
pub fn project_flips(flips_deg: &[f64], budget: &PowerBudget, lo_deg: f64) -> Vec<f64> {
    let mut a: Vec<f64> = flips_deg.iter().map(|v| v.clamp(lo_deg, 180.0)).collect();
    let lo2 = lo_deg.to_radians().powi(2);
    let mut pinned = vec![false; a.len()];
    for _ in 0..=a.len() {
        let used = PowerBudget::usage(&a);
        if used <= budget.limit {
            break;
        }
        let fixed: f64 = pinned.iter().filter(|&&p| p).count() as f64 * lo2;
        let free: f64 = a
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(v, _)| v.to_radians().powi(2))
            .sum();
        let room = (budget.limit - fixed).max(0.0);
        let s = if free > 0.0 { (room / free).sqrt() } else { 0.0 };
        let mut newly = false;
        for (v, p) in a.iter_mut().zip(pinned.iter_mut()) {
            if !*p {
                *v *= s;
                if *v < lo_deg {
                    *v = lo_deg;
                    *p = true;
                    newly = true;
                }
            }
        }
        if !newly {
            break;
        }
    }
    a
}

/// Projected gradient ascent on the `target` Fisher diagonal over the
/// refocusing flips, starting from the equal-power constant schedule.
pub fn optimize_flips(
    tissue: &TissueParams,
    template: &SequenceParams,
    budget: &PowerBudget,
    target: Param,
    cfg: &FlipOptConfig,
) -> Result<FlipSchedule> {
    tissue.validate()?;
    template.validate()?;
    let t = template.n_echoes;
    if !(cfg.alpha_min_deg >= 0.0 && cfg.alpha_min_deg < 180.0) {
        return Err(Error::invalid("alpha_min must lie in [0, 180)"));
    }
    if PowerBudget::usage(&vec![cfg.alpha_min_deg; t]) > budget.limit {
        return Err(Error::invalid(format!(
            "no feasible start: {t} pulses at alpha_min {}° exceed the power limit",
            cfg.alpha_min_deg
        )));
    }
    let objective = |flips: &[f64]| target_information(tissue, &template.with_flips(flips.to_vec()), target);

    let mut flips = project_flips(&vec![budget.equal_power_flip(t); t], budget, cfg.alpha_min_deg);
    let mut value = objective(&flips)?;
    let mut trace = vec![value];
    let mut step = cfg.initial_step_deg;
    let h = 1e-3;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let grad: Vec<f64> = (0..t)
            .into_par_iter()
            .map(|i| {
                let mut up = flips.clone();
                let mut dn = flips.clone();
                up[i] += h;
                dn[i] -= h;
                Ok((objective(&up)? - objective(&dn)?) / (2.0 * h))
            })
            .collect::<Result<_>>()?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm > 0.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let cand: Vec<f64> = flips.iter().zip(&grad).map(|(a, g)| a + step * g / gnorm).collect();
            let cand = project_flips(&cand, budget, cfg.alpha_min_deg);
            let v = objective(&cand)?;
            if v > value {
                flips = cand;
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations += 1;
        trace.push(value);
        step *= 2.0;
    }
    Ok(FlipSchedule {
        flips_deg: flips,
        objective_trace: trace,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxResult {
    pub best: usize,
    /// Worst-case bound of each candidate (`+∞` when any tissue is singular).
    pub worst_case: Vec<f64>,
}

/// `argmin_s max_tissue CRLB(target)`, lowest index on ties.
pub fn minmax_grid_search(
    tissues: &[TissueParams],
    candidates: &[SequenceParams],
    target: Param,
    params: &[Param],
    sigma: f64,
) -> Result<MinMaxResult> {
    if tissues.is_empty() || candidates.is_empty() {
        return Err(Error::invalid("min-max search needs tissues and candidates"));
    }
    if !params.contains(&target) {
        return Err(Error::invalid("target must be one of the Fisher parameters"));
    }
    let worst_case: Vec<f64> = candidates
        .par_iter()
        .map(|seq| {
            let mut worst = f64::NEG_INFINITY;
            for tissue in tissues {
                let cost = match fisher_info(tissue, seq, sigma, params).and_then(|i| crlb(&i, target)) {
                    Ok(c) => c,
                    Err(Error::Singular(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                worst = worst.max(cost);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let best = worst_case
        .iter()
        .enumerate()
        .fold(0, |b, (i, &c)| if c < worst_case[b] { i } else { b });
    Ok(MinMaxResult { best, worst_case })
}

/// Echo time maximizing `|e^{−t/a} − e^{−t/b}|`.
pub fn optimal_te(t2a: f64, t2b: f64) -> Result<f64> {
    if !(t2a > 0.0 && t2b > 0.0) {
        return Err(Error::invalid("T2 values must be positive"));
    }
    if t2a == t2b {
        return Err(Error::invalid("equal T2 values have no contrast"));
    }
    Ok(-(t2a / t2b).ln() / (1.0 / t2a - 1.0 / t2b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsymptoticConfig {
    /// Target amplitude.
    pub s_target: f64,
    /// Largest flip (degrees); also the end of the final ramp.
    pub alpha_max: f64,
    /// Echoes held at `s_target` after the approach.
    pub n_constant: usize,
    /// Geometric factor of the approach, `s_i = s_t + (s_1max − s_t)·factor^i`.
    pub factor: f64,
    /// The approach ends once `|s_i − s_t| ≤ settle_tol · s_t`.
    pub settle_tol: f64,
}

impl Default for AsymptoticConfig {
    fn default() -> Self {
        Self {
            s_target: 0.5,
            alpha_max: 180.0,
            n_constant: 8,
            factor: 0.5,
            settle_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticDesign {
    pub flips_deg: Vec<f64>,
    /// Amplitude targets of the controlled echoes (approach then constant).
    pub targets: Vec<f64>,
    /// Echoes in the approach segment.
    pub n_approach: usize,
}

/// Bisection iterations on the flip angle.
const FLIP_BISECTIONS: usize = 100;

/// Grid points for locating the flip of largest next-echo amplitude.
const PEAK_SCAN: usize = 180;

/// Flip in `[0, alpha_max]` maximizing the next echo magnitude, and that
/// magnitude. The amplitude is not monotone in the flip, so the peak is
/// bracketed on a grid and refined by golden-section search.
fn peak_flip(train: &EchoTrain, phase_deg: f64, alpha_max: f64) -> (f64, f64) {
    let amp = |a: f64| train.peek(a, phase_deg).norm();
    let node = |j: usize| alpha_max * j as f64 / PEAK_SCAN as f64;
    let vals: Vec<f64> = (0..=PEAK_SCAN).map(|j| amp(node(j))).collect();
    let best = vals
        .iter()
        .enumerate()
        .fold(0, |b, (j, &v)| if v > vals[b] { j } else { b });
    let (mut a, mut b) = (node(best.saturating_sub(1)), node((best + 1).min(PEAK_SCAN)));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    while b - a > 1e-10 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if amp(c) >= amp(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let mid = 0.5 * (a + b);
    let (x, v) = if amp(mid) >= vals[best] { (mid, amp(mid)) } else { (node(best), vals[best]) };
    (x, v)
}

/// Prospective flip design: each flip is solved by bisection so the next
/// echo magnitude hits its target given the current EPG state. After the
/// approach and `n_constant` held echoes, the flips ramp linearly to
/// `alpha_max`.
pub fn design_asymptotic_flips(
    tissue: &TissueParams,
    template: &SequenceParams,
    cfg: &AsymptoticConfig,
) -> Result<AsymptoticDesign> {
    let t = template.n_echoes;
    if !(cfg.alpha_max > 0.0 && cfg.alpha_max <= 180.0) {
        return Err(Error::invalid("alpha_max must lie in (0, 180]"));
    }
    if !(cfg.factor > 0.0 && cfg.factor < 1.0) || !(cfg.settle_tol > 0.0) {
        return Err(Error::invalid("factor must lie in (0, 1) and settle_tol be positive"));
    }
    let mut train = EchoTrain::excite(tissue, template)?;
    let phase = |i: usize| template.flip_phases_deg[i];
    let s1max = peak_flip(&train, phase(0), cfg.alpha_max).1;
    if !(cfg.s_target > 0.0 && cfg.s_target <= s1max) {
        return Err(Error::invalid(format!(
            "s_target {} outside (0, {s1max}] (largest first echo)",
            cfg.s_target
        )));
    }

    let mut targets = Vec::new();
    let mut i = 1;
    loop {
        let s = cfg.s_target + (s1max - cfg.s_target) * cfg.factor.powi(i as i32);
        targets.push(s);
        if (s - cfg.s_target).abs() <= cfg.settle_tol * cfg.s_target || targets.len() >= t {
            break;
        }
        i += 1;
    }
    let n_approach = targets.len();
    for _ in 0..cfg.n_constant {
        if targets.len() >= t {
            break;
        }
        targets.push(cfg.s_target);
    }

    let mut flips = Vec::with_capacity(t);
    for (e, &target) in targets.iter().enumerate() {
        let amp = |a: f64| train.peek(a, phase(e)).norm() - target;
        // smallest flip reaching the target: bisect on the rising branch
        let (peak, _) = peak_flip(&train, phase(e), cfg.alpha_max);
        let (mut lo, mut hi) = (0.0, peak);
        let slack = 1e-12 * target.max(1.0);
        if amp(lo) > slack || amp(hi) < -slack {
            return Err(Error::Unreachable { echo: e + 1 });
        }
        for _ in 0..FLIP_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if amp(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = 0.5 * (lo + hi);
        train.advance(a, phase(e));
        flips.push(a);
    }
    let start = flips.last().copied().unwrap_or(cfg.alpha_max);
    let remaining = t - flips.len();
    for r in 1..=remaining {
        flips.push(start + (cfg.alpha_max - start) * r as f64 / remaining as f64);
    }
    Ok(AsymptoticDesign {
        flips_deg: flips,
        targets,
        n_approach,
    })
}
