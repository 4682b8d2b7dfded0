//! Fast-spin-echo signal simulation.
//!
//! Two independent simulators are provided:
//!
//! * [`simulate_fse`] runs the extended phase graph (EPG) recursion over the
//!   configuration states `(F+, F-, Z)`.
//! * [`bloch_isochromat_train`] integrates the discrete Bloch rotation and
//!   relaxation recursion for an ensemble of isochromats whose per-interval
//!   dephasing angles are uniformly spaced on `[0, 2π)`. Averaging the
//!   transverse magnetization over the ensemble is an exact Fourier
//!   quadrature of the EPG `F+[0]` state once the ensemble has at least
//!   `2(T+1)` members, so the two must agree to rounding.
//!
//! Timing is the symmetric FSE layout: every echo interval relaxes for
//! `Ts/2`, dephases by one unit, refocuses, dephases by one unit and relaxes
//! for `Ts/2`; echo `i` is recorded at `t = i·Ts`.
//!
//! Public units are milliseconds and degrees; everything internal is radians.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default excitation phase: rotation about `x`.
pub const EXCITATION_PHASE_DEG: f64 = 0.0;

/// Default refocusing phase: rotation about `y` (CPMG relative to a `0°`
/// excitation).
pub const CPMG_PHASE_DEG: f64 = 90.0;

/// Receiver demodulation. A `0°`-phase excitation tips equilibrium
/// magnetization onto `-y`, i.e. `F+ = -i·sin(α)`; the receiver is aligned
/// with that axis so an ideal CPMG train reads out real and positive.
const RECEIVER: C64 = C64::new(0.0, 1.0);

/// Intrinsic voxel parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueParams {
    /// Complex proton density.
    pub rho: C64,
    /// Longitudinal relaxation time (ms).
    pub t1: f64,
    /// Transverse relaxation time (ms).
    pub t2: f64,
    /// Transmit field scale applied to every flip angle.
    pub eta: f64,
}

impl TissueParams {
    /// Unit proton density, nominal transmit field.
    pub fn new(t1: f64, t2: f64) -> Self {
        Self {
            rho: C64::new(1.0, 0.0),
            t1,
            t2,
            eta: 1.0,
        }
    }

    pub fn with_rho(mut self, rho: C64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t1 > 0.0 && self.t2 > 0.0 && self.t2 <= self.t1 && self.eta > 0.0;
        if !ok || !self.rho.re.is_finite() || !self.rho.im.is_finite() {
            return Err(Error::invalid(format!(
                "tissue requires t1 > 0, 0 < t2 <= t1, eta > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// User-controlled sequence parameters of one echo train.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceParams {
    pub excitation_deg: f64,
    /// Refocusing flip angle per echo.
    pub flips_deg: Vec<f64>,
    /// Refocusing RF phase per echo.
    pub flip_phases_deg: Vec<f64>,
    pub echo_spacing_ms: f64,
    pub n_echoes: usize,
}

impl SequenceParams {
    /// 90° excitation followed by the given refocusing train at CPMG phase.
    pub fn from_flips(flips_deg: Vec<f64>, echo_spacing_ms: f64) -> Self {
        let n = flips_deg.len();
        Self {
            excitation_deg: 90.0,
            flips_deg,
            flip_phases_deg: vec![CPMG_PHASE_DEG; n],
            echo_spacing_ms,
            n_echoes: n,
        }
    }

    pub fn constant(n_echoes: usize, echo_spacing_ms: f64, flip_deg: f64) -> Self {
        Self::from_flips(vec![flip_deg; n_echoes], echo_spacing_ms)
    }

    /// Ideal CPMG: 90° excitation, 180° refocusing.
    pub fn cpmg(n_echoes: usize, echo_spacing_ms: f64) -> Self {
        Self::constant(n_echoes, echo_spacing_ms, 180.0)
    }

    /// Linear flip ramp from `start_deg` to `end_deg` (inclusive).
    pub fn ramp(n_echoes: usize, echo_spacing_ms: f64, start_deg: f64, end_deg: f64) -> Self {
        let flips = (0..n_echoes)
            .map(|i| {
                if n_echoes == 1 {
                    start_deg
                } else {
                    start_deg + (end_deg - start_deg) * i as f64 / (n_echoes - 1) as f64
                }
            })
            .collect();
        Self::from_flips(flips, echo_spacing_ms)
    }

    /// Same timing and phases with a different refocusing train.
    pub fn with_flips(&self, flips_deg: Vec<f64>) -> Self {
        let mut seq = self.clone();
        seq.flips_deg = flips_deg;
        seq
    }

    /// Echo times `i·Ts`, `i = 1..=T` (ms).
    pub fn echo_times(&self) -> Vec<f64> {
        (1..=self.n_echoes)
            .map(|i| i as f64 * self.echo_spacing_ms)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_echoes == 0 {
            return Err(Error::invalid("sequence needs at least one echo"));
        }
        if self.flips_deg.len() != self.n_echoes || self.flip_phases_deg.len() != self.n_echoes {
            return Err(Error::dims(
                "sequence flip train",
                self.n_echoes,
                (self.flips_deg.len(), self.flip_phases_deg.len()),
            ));
        }
        if !(self.echo_spacing_ms > 0.0) {
            return Err(Error::invalid("echo spacing must be positive"));
        }
        if let Some(bad) = self
            .flips_deg
            .iter()
            .find(|f| !(0.0..=180.0).contains(*f))
        {
            return Err(Error::invalid(format!(
                "refocusing flip {bad} deg outside [0, 180]"
            )));
        }
        Ok(())
    }
}

/// Sampled transverse magnetization, one entry per echo.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalEvolution {
    pub samples: Vec<C64>,
}

impl SignalEvolution {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// EPG rotation operator for a pulse of flip `alpha_deg` about the
/// transverse axis at phase `phi_deg`, acting on `(F+, F-, Z)` of one order.
///
/// This is the right-handed rotation about `(cos φ, sin φ, 0)` written in
/// the configuration-state basis.
pub fn rf_matrix(alpha_deg: f64, phi_deg: f64) -> [[C64; 3]; 3] {
    rf_matrix_rad(alpha_deg.to_radians(), phi_deg.to_radians())
}

fn rf_matrix_rad(alpha: f64, phi: f64) -> [[C64; 3]; 3] {
    let c2 = (alpha / 2.0).cos().powi(2);
    let s2 = (alpha / 2.0).sin().powi(2);
    let sa = alpha.sin();
    let ca = alpha.cos();
    let e = C64::from_polar(1.0, phi);
    let e2 = e * e;
    let i = C64::i();
    [
        [C64::from(c2), e2 * s2, -i * e * sa],
        [e2.conj() * s2, C64::from(c2), i * e.conj() * sa],
        [-i * 0.5 * e.conj() * sa, i * 0.5 * e * sa, C64::from(ca)],
    ]
}

/// Relaxation factors over a half echo interval.
#[derive(Clone, Copy, Debug)]
struct HalfInterval {
    e1: f64,
    e2: f64,
}

impl HalfInterval {
    fn new(tissue: &TissueParams, seq: &SequenceParams) -> Self {
        let tau = 0.5 * seq.echo_spacing_ms;
        Self {
            e1: (-tau / tissue.t1).exp(),
            e2: (-tau / tissue.t2).exp(),
        }
    }
}

/// Components below this are zeroed. Near-180° trains otherwise breed
/// subnormal values, which are orders of magnitude slower to compute with.
const FLUSH: f64 = 1e-250;

fn flush(v: C64) -> C64 {
    C64::new(
        if v.re.abs() < FLUSH { 0.0 } else { v.re },
        if v.im.abs() < FLUSH { 0.0 } else { v.im },
    )
}

/// Configuration states of a dephasing spin ensemble, orders `0..=max_order`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpgState {
    pub fplus: Vec<C64>,
    pub fminus: Vec<C64>,
    pub z: Vec<C64>,
    pub max_order: usize,
}

impl EpgState {
    /// Thermal equilibrium: `Z[0] = 1`, everything else zero.
    pub fn equilibrium(max_order: usize) -> Self {
        let n = max_order + 1;
        let mut z = vec![C64::new(0.0, 0.0); n];
        z[0] = C64::new(1.0, 0.0);
        Self {
            fplus: vec![C64::new(0.0, 0.0); n],
            fminus: vec![C64::new(0.0, 0.0); n],
            z,
            max_order,
        }
    }

    /// Instantaneous RF pulse.
    pub fn rotate(&mut self, alpha_rad: f64, phi_rad: f64) {
        self.rotate_upto(alpha_rad, phi_rad, self.max_order);
    }

    /// Rotation of orders `0..=top` only; higher orders must be empty.
    fn rotate_upto(&mut self, alpha_rad: f64, phi_rad: f64, top: usize) {
        let t = rf_matrix_rad(alpha_rad, phi_rad);
        for k in 0..=top {
            let (fp, fm, z) = (self.fplus[k], self.fminus[k], self.z[k]);
            self.fplus[k] = t[0][0] * fp + t[0][1] * fm + t[0][2] * z;
            self.fminus[k] = t[1][0] * fp + t[1][1] * fm + t[1][2] * z;
            self.z[k] = t[2][0] * fp + t[2][1] * fm + t[2][2] * z;
        }
    }

    fn relax(&mut self, r: HalfInterval, top: usize) {
        let n = top + 1;
        for f in self.fplus[..n].iter_mut().chain(self.fminus[..n].iter_mut()) {
            *f = flush(*f * r.e2);
        }
        for z in self.z[..n].iter_mut() {
            *z = flush(*z * r.e1);
        }
        self.z[0] += 1.0 - r.e1;
    }

    /// One unit of gradient dephasing. States pushed past `max_order` are
    /// dropped.
    pub fn shift(&mut self) {
        self.fplus.rotate_right(1);
        self.fminus.rotate_left(1);
        let q = self.max_order;
        self.fminus[q] = C64::new(0.0, 0.0);
        self.fplus[0] = self.fminus[0].conj();
    }

    /// Advances through one full echo interval and returns the raw `F+[0]`
    /// at the echo. `echo` is the 0-based index of this interval; after it
    /// only orders up to `2·echo + 2` can be populated.
    fn echo_interval(&mut self, r: HalfInterval, alpha_rad: f64, phi_rad: f64, echo: usize) -> C64 {
        let top = (2 * echo + 2).min(self.max_order);
        self.relax(r, top);
        self.shift();
        self.rotate_upto(alpha_rad, phi_rad, top);
        self.shift();
        self.relax(r, top);
        self.fplus[0]
    }
}

/// Reusable per-echo stepping for algorithms that choose each refocusing
/// pulse online (e.g. prospective flip design).
#[derive(Clone, Debug)]
pub struct EchoTrain {
    state: EpgState,
    relax: HalfInterval,
    rho: C64,
    eta: f64,
    echo: usize,
}

impl EchoTrain {
    /// Applies the excitation; the train is positioned before echo 1.
    pub fn excite(tissue: &TissueParams, seq: &SequenceParams) -> Result<Self> {
        tissue.validate()?;
        seq.validate()?;
        let mut state = EpgState::equilibrium(seq.n_echoes + 2);
        state.rotate(
            (tissue.eta * seq.excitation_deg).to_radians(),
            EXCITATION_PHASE_DEG.to_radians(),
        );
        Ok(Self {
            state,
            relax: HalfInterval::new(tissue, seq),
            rho: tissue.rho,
            eta: tissue.eta,
            echo: 0,
        })
    }

    /// Number of echoes already played.
    pub fn echoes_played(&self) -> usize {
        self.echo
    }

    pub fn state(&self) -> &EpgState {
        &self.state
    }

    /// Echo that would result from refocusing with `flip_deg` next, without
    /// advancing the train.
    pub fn peek(&self, flip_deg: f64, phase_deg: f64) -> C64 {
        self.clone().advance(flip_deg, phase_deg)
    }

    /// Plays the next refocusing pulse and returns the recorded echo.
    pub fn advance(&mut self, flip_deg: f64, phase_deg: f64) -> C64 {
        let raw = self.state.echo_interval(
            self.relax,
            (self.eta * flip_deg).to_radians(),
            phase_deg.to_radians(),
            self.echo,
        );
        self.echo += 1;
        self.rho * RECEIVER * raw
    }
}

/// EPG simulation of one FSE train with state capacity `T + 2`.
pub fn simulate_fse(tissue: &TissueParams, seq: &SequenceParams) -> Result<SignalEvolution> {
    simulate_fse_with_capacity(tissue, seq, seq.n_echoes + 2)
}

/// EPG simulation with an explicit maximum dephasing order. Capacities below
/// `T + 1` would truncate states that still refocus within the train and are
/// rejected.
pub fn simulate_fse_with_capacity(
    tissue: &TissueParams,
    seq: &SequenceParams,
    max_order: usize,
) -> Result<SignalEvolution> {
    tissue.validate()?;
    seq.validate()?;
    if max_order < seq.n_echoes + 1 {
        return Err(Error::Capacity {
            capacity: max_order,
            n_echoes: seq.n_echoes,
        });
    }
    let relax = HalfInterval::new(tissue, seq);
    let mut state = EpgState::equilibrium(max_order);
    state.rotate(
        (tissue.eta * seq.excitation_deg).to_radians(),
        EXCITATION_PHASE_DEG.to_radians(),
    );
    let scale = tissue.rho * RECEIVER;
    let samples = seq
        .flips_deg
        .iter()
        .zip(&seq.flip_phases_deg)
        .enumerate()
        .map(|(i, (&flip, &phase))| {
            let raw = state.echo_interval(
                relax,
                (tissue.eta * flip).to_radians(),
                phase.to_radians(),
                i,
            );
            scale * raw
        })
        .collect();
    Ok(SignalEvolution { samples })
}

/// Brute-force Bloch simulation over `n_isochromats` spins whose dephasing
/// per unit gradient interval is `2πn/N`. Exact (to rounding) relative to
/// EPG once `n_isochromats >= 2(T+1)`; smaller ensembles alias.
pub fn bloch_isochromat_train(
    tissue: &TissueParams,
    seq: &SequenceParams,
    n_isochromats: usize,
) -> Result<SignalEvolution> {
    tissue.validate()?;
    seq.validate()?;
    if n_isochromats == 0 {
        return Err(Error::invalid("need at least one isochromat"));
    }
    let relax = HalfInterval::new(tissue, seq);
    let n = n_isochromats as f64;
    let precession: Vec<(f64, f64)> = (0..n_isochromats)
        .map(|k| {
            let psi = 2.0 * std::f64::consts::PI * k as f64 / n;
            (psi.cos(), psi.sin())
        })
        .collect();
    let mut spins = vec![[0.0, 0.0, 1.0]; n_isochromats];

    let excite = rotation(
        (tissue.eta * seq.excitation_deg).to_radians(),
        EXCITATION_PHASE_DEG.to_radians(),
    );
    spins.iter_mut().for_each(|m| *m = apply(&excite, m));

    let relax_spin = |m: &mut [f64; 3]| {
        m[0] *= relax.e2;
        m[1] *= relax.e2;
        m[2] = relax.e1 * m[2] + (1.0 - relax.e1);
    };
    let precess = |m: &mut [f64; 3], (c, s): (f64, f64)| {
        let (x, y) = (m[0], m[1]);
        m[0] = c * x - s * y;
        m[1] = s * x + c * y;
    };

    let mut samples = Vec::with_capacity(seq.n_echoes);
    for (&flip, &phase) in seq.flips_deg.iter().zip(&seq.flip_phases_deg) {
        let r = rotation((tissue.eta * flip).to_radians(), phase.to_radians());
        let mut sum = C64::new(0.0, 0.0);
        for (m, &p) in spins.iter_mut().zip(&precession) {
            relax_spin(m);
            precess(m, p);
            *m = apply(&r, m);
            precess(m, p);
            relax_spin(m);
            sum += C64::new(m[0], m[1]);
        }
        samples.push(tissue.rho * RECEIVER * sum / n);
    }
    Ok(SignalEvolution { samples })
}

/// Rodrigues rotation by `alpha` about `(cos φ, sin φ, 0)`.
fn rotation(alpha: f64, phi: f64) -> [[f64; 3]; 3] {
    let (ux, uy) = (phi.cos(), phi.sin());
    let (c, s) = (alpha.cos(), alpha.sin());
    let t = 1.0 - c;
    [
        [c + ux * ux * t, ux * uy * t, uy * s],
        [ux * uy * t, c + uy * uy * t, -ux * s],
        [-uy * s, ux * s, c],
    ]
}

fn apply(r: &[[f64; 3]; 3], m: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * m[0] + r[0][1] * m[1] + r[0][2] * m[2],
        r[1][0] * m[0] + r[1][1] * m[1] + r[1][2] * m[2],
        r[2][0] * m[0] + r[2][1] * m[1] + r[2][2] * m[2],
    ]
}

/// A differentiable parameter of the signal model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    Rho,
    T1,
    T2,
    Eta,
    /// Refocusing flip angle of echo `i` (0-based).
    Flip(usize),
}

impl Param {
    pub fn name(&self) -> String {
        match self {
            Param::Rho => "rho".into(),
            Param::T1 => "t1".into(),
            Param::T2 => "t2".into(),
            Param::Eta => "eta".into(),
            Param::Flip(i) => format!("flip{i}"),
        }
    }
}

/// Relative step for T1, T2 and η.
pub const REL_STEP: f64 = 1e-4;
/// Absolute step for flip angles (radians).
pub const ANGLE_STEP_RAD: f64 = 1e-4;

/// `T×P` Jacobian `∂f/∂p` by central differences.
///
/// Columns follow `wrt`. The ρ column is exact (`f/ρ`); flip-angle columns
/// are per degree, T1/T2 per millisecond.
pub fn signal_jacobian(
    tissue: &TissueParams,
    seq: &SequenceParams,
    wrt: &[Param],
) -> Result<DMatrix<C64>> {
    signal_jacobian_with_steps(tissue, seq, wrt, REL_STEP, ANGLE_STEP_RAD)
}

/// [`signal_jacobian`] with explicit finite-difference steps.
pub fn signal_jacobian_with_steps(
    tissue: &TissueParams,
    seq: &SequenceParams,
    wrt: &[Param],
    rel_step: f64,
    angle_step_rad: f64,
) -> Result<DMatrix<C64>> {
    tissue.validate()?;
    seq.validate()?;
    let t = seq.n_echoes;
    let mut jac = DMatrix::zeros(t, wrt.len());
    for (col, &p) in wrt.iter().enumerate() {
        let column: Vec<C64> = match p {
            Param::Rho => simulate_fse(&tissue.with_rho(C64::new(1.0, 0.0)), seq)?.samples,
            Param::T1 | Param::T2 | Param::Eta => {
                let value = match p {
                    Param::T1 => tissue.t1,
                    Param::T2 => tissue.t2,
                    _ => tissue.eta,
                };
                let h = rel_step * value;
                let perturb = |d: f64| {
                    let mut tt = *tissue;
                    match p {
                        Param::T1 => tt.t1 += d,
                        Param::T2 => tt.t2 += d,
                        _ => tt.eta += d,
                    }
                    tt
                };
                central(
                    &simulate_unchecked(&perturb(h), seq),
                    &simulate_unchecked(&perturb(-h), seq),
                    h,
                )
            }
            Param::Flip(i) => {
                if i >= t {
                    return Err(Error::invalid(format!("flip index {i} out of range")));
                }
                let h = angle_step_rad.to_degrees();
                let perturb = |d: f64| {
                    let mut s = seq.clone();
                    s.flips_deg[i] += d;
                    s
                };
                central(
                    &simulate_unchecked(tissue, &perturb(h)),
                    &simulate_unchecked(tissue, &perturb(-h)),
                    h,
                )
            }
        };
        for (row, v) in column.into_iter().enumerate() {
            jac[(row, col)] = v;
        }
    }
    Ok(jac)
}

fn central(plus: &[C64], minus: &[C64], h: f64) -> Vec<C64> {
    plus.iter()
        .zip(minus)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

/// EPG without input validation: finite-difference probes may step just
/// outside the validated domain (e.g. a 180° flip perturbed upward, or
/// `t2` nudged past `t1`), where the recursion is still well defined.
pub(crate) fn simulate_unchecked(tissue: &TissueParams, seq: &SequenceParams) -> Vec<C64> {
    let relax = HalfInterval::new(tissue, seq);
    let mut state = EpgState::equilibrium(seq.n_echoes + 2);
    state.rotate(
        (tissue.eta * seq.excitation_deg).to_radians(),
        EXCITATION_PHASE_DEG.to_radians(),
    );
    let scale = tissue.rho * RECEIVER;
    seq.flips_deg
        .iter()
        .zip(&seq.flip_phases_deg)
        .enumerate()
        .map(|(i, (&flip, &phase))| {
            scale * state.echo_interval(relax, (tissue.eta * flip).to_radians(), phase.to_radians(), i)
        })
        .collect()
}
