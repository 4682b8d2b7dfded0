//! Undersampling-mask generation and scoring.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoding::{Mask, SamplingMasks};
use crate::error::{Error, Result};
use crate::fft::{centered_freq, Fft2};
use crate::spin_sim::C64;
use crate::wavelet::Transform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DensityShape {
    /// `(1 - r)^power`.
    Polynomial { power: f64 },
    /// `exp(-r² / 2σ²)`.
    Gaussian { sigma: f64 },
}

/// Variable-density sampling profile over normalized radius `r ∈ [0, 1]`
/// (`r = 1` at the k-space corner).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityProfile {
    pub shape: DensityShape,
    /// Radius (fraction of k-max) that is always acquired.
    pub fully_sampled_radius: f64,
    /// Target acceleration `R`.
    pub accel: f64,
}

impl Default for DensityProfile {
    fn default() -> Self {
        Self {
            shape: DensityShape::Polynomial { power: 3.0 },
            fully_sampled_radius: 0.04,
            accel: 4.0,
        }
    }
}

fn normalized_radius(nx: usize, ny: usize) -> Array2<f64> {
    let hx = (nx as f64 / 2.0).max(1.0);
    let hy = (ny as f64 / 2.0).max(1.0);
    let r = Array2::from_shape_fn((nx, ny), |(i, j)| {
        let kx = centered_freq(i, nx) / hx;
        let ky = centered_freq(j, ny) / hy;
        (kx * kx + ky * ky).sqrt()
    });
    let rmax = r.iter().cloned().fold(0.0, f64::max);
    r / rmax
}

impl DensityProfile {
    fn weight(&self, r: f64) -> f64 {
        match self.shape {
            DensityShape::Polynomial { power } => (1.0 - r).max(0.0).powf(power),
            DensityShape::Gaussian { sigma } => (-r * r / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// Per-location acquisition probability, calibrated by bisection on a
    /// global scale so that the expected count is `N / R`.
    pub fn probabilities(&self, dims: (usize, usize)) -> Result<Array2<f64>> {
        let (nx, ny) = dims;
        if !(self.accel >= 1.0) {
            return Err(Error::invalid(format!(
                "acceleration {} must be >= 1",
                self.accel
            )));
        }
        if self.accel == 1.0 {
            return Ok(Array2::ones((nx, ny)));
        }
        let r = normalized_radius(nx, ny);
        let center = r.mapv(|v| v <= self.fully_sampled_radius);
        let w = r.mapv(|v| self.weight(v));
        let target = (nx * ny) as f64 / self.accel;
        let prob = |c: f64| {
            Array2::from_shape_fn((nx, ny), |idx| {
                if center[idx] {
                    1.0
                } else {
                    (c * w[idx]).min(1.0)
                }
            })
        };
        let expected = |c: f64| prob(c).sum();

        if expected(0.0) > target {
            return Err(Error::invalid(format!(
                "fully sampled center alone exceeds N/R = {target:.1}"
            )));
        }
        let mut hi = 1.0;
        while expected(hi) < target {
            hi *= 2.0;
            if hi > 1e15 {
                return Err(Error::invalid(format!(
                    "acceleration {} infeasible for this profile",
                    self.accel
                )));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(prob(hi))
    }
}

/// Independent Bernoulli draws from the calibrated density.
pub fn draw_mask(profile: &DensityProfile, dims: (usize, usize), seed: u64) -> Result<Mask> {
    let (nx, ny) = dims;
    if nx < 4 || ny < 4 {
        return Err(Error::invalid(format!("mask grid {nx}x{ny} smaller than 4x4")));
    }
    let p = profile.probabilities(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(p.mapv(|pi| rng.gen::<f64>() < pi))
}

/// One independently drawn mask per echo; echo `i` uses `seed + i`.
pub fn draw_per_echo_masks(
    profile: &DensityProfile,
    dims: (usize, usize),
    n_echoes: usize,
    seed: u64,
) -> Result<SamplingMasks> {
    let frames = (0..n_echoes)
        .map(|i| draw_mask(profile, dims, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    SamplingMasks::from_frames(&frames)
}

/// Regular Cartesian subsampling keeping every `step_x`-th row and
/// `step_y`-th column (phase aligned to DC).
pub fn uniform_grid_mask(dims: (usize, usize), step_x: usize, step_y: usize) -> Mask {
    let (nx, ny) = dims;
    Array2::from_shape_fn((nx, ny), |(i, j)| {
        let dx = i as isize - (nx / 2) as isize;
        let dy = j as isize - (ny / 2) as isize;
        dx.rem_euclid(step_x as isize) == 0 && dy.rem_euclid(step_y as isize) == 0
    })
}

/// Sparsifying transform plus the assumed support of the coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityModel {
    pub transform: Transform,
    /// Row-major coefficient indices assumed nonzero.
    pub support: Vec<usize>,
}

impl SparsityModel {
    pub fn new(transform: Transform, support: Vec<usize>) -> Self {
        Self { transform, support }
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        self.transform.check(dims.0, dims.1)?;
        let n = dims.0 * dims.1;
        let mut seen = vec![false; n];
        for &s in &self.support {
            if s >= n {
                return Err(Error::invalid(format!("support index {s} >= {n}")));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::invalid(format!("duplicate support index {s}")));
            }
        }
        Ok(())
    }
}

/// `Ψ F^H M F Ψ^H e_j` for one coefficient index.
fn tpsf_column(fft: &Fft2, mask: &Mask, transform: Transform, j: usize) -> Array2<C64> {
    let (nx, ny) = mask.dim();
    let mut e = Array2::zeros((nx, ny));
    e[(j / ny, j % ny)] = C64::new(1.0, 0.0);
    let mut k = fft.forward(&transform.inverse(&e));
    k.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = C64::new(0.0, 0.0);
        }
    });
    transform.forward(&fft.inverse(&k))
}

/// Peak off-diagonal transform point spread over `probe_count` randomly
/// chosen coefficients, each column normalized by its diagonal entry.
pub fn tpsf_peak(mask: &Mask, model: &SparsityModel, probe_count: usize, seed: u64) -> Result<f64> {
    let (nx, ny) = mask.dim();
    model.transform.check(nx, ny)?;
    if probe_count == 0 {
        return Err(Error::invalid("probe_count must be >= 1"));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::invalid("TPSF of an empty mask is undefined"));
    }
    let n = nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = rand::seq::index::sample(&mut rng, n, probe_count.min(n)).into_vec();
    let fft = Fft2::new(nx, ny);
    let peaks = probes
        .par_iter()
        .map(|&j| {
            let col = tpsf_column(&fft, mask, model.transform, j);
            let diag = col[(j / ny, j % ny)].norm();
            if diag == 0.0 {
                return Err(Error::Singular(format!("coefficient {j} is unobserved")));
            }
            let off = col
                .indexed_iter()
                .filter(|((a, b), _)| a * ny + b != j)
                .map(|(_, v)| v.norm())
                .fold(0.0, f64::max);
            Ok(off / diag)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(peaks.into_iter().fold(0.0, f64::max))
}

/// Outcome of Monte-Carlo mask selection.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloMask {
    pub mask: Mask,
    pub peak: f64,
    pub best_trial: usize,
    pub trial_peaks: Vec<f64>,
}

/// Draws `n_trials` masks (trial `t` uses seed `seed + t`) and keeps the one
/// with the lowest TPSF peak; ties go to the earliest trial. Every trial is
/// scored on the same probe set.
pub fn monte_carlo_mask(
    profile: &DensityProfile,
    dims: (usize, usize),
    model: &SparsityModel,
    n_trials: usize,
    probe_count: usize,
    seed: u64,
) -> Result<MonteCarloMask> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mask = draw_mask(profile, dims, seed.wrapping_add(t as u64))?;
            let peak = tpsf_peak(&mask, model, probe_count, seed)?;
            Ok((mask, peak))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (t, (_, p)) in trials.iter().enumerate() {
        if *p < trials[best].1 {
            best = t;
        }
    }
    let trial_peaks = trials.iter().map(|(_, p)| *p).collect();
    let (mask, peak) = trials.into_iter().nth(best).expect("n_trials >= 1");
    Ok(MonteCarloMask {
        mask,
        peak,
        best_trial: best,
        trial_peaks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EchoOrdering {
    /// Sort by `|k|` ascending, early echoes take the center.
    CenterOut,
    /// Uniform random shuffle.
    Randomized,
}

impl EchoOrdering {
    pub fn name(&self) -> &'static str {
        match self {
            EchoOrdering::CenterOut => "center-out",
            EchoOrdering::Randomized => "randomized",
        }
    }
}

/// Partitions the acquired locations of `mask` into `n_echoes` disjoint
/// echo masks of near-equal size (earlier echoes take the remainder).
pub fn assign_echoes(
    mask: &Mask,
    n_echoes: usize,
    ordering: EchoOrdering,
    seed: u64,
) -> Result<SamplingMasks> {
    if n_echoes == 0 {
        return Err(Error::invalid("n_echoes must be >= 1"));
    }
    let (nx, ny) = mask.dim();
    let mut locs: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|(idx, _)| idx)
        .collect();
    if locs.len() < n_echoes {
        return Err(Error::invalid(format!(
            "{} samples cannot cover {n_echoes} echoes",
            locs.len()
        )));
    }
    match ordering {
        EchoOrdering::CenterOut => {
            let radius = |&(i, j): &(usize, usize)| {
                let (kx, ky) = (centered_freq(i, nx), centered_freq(j, ny));
                kx * kx + ky * ky
            };
            // stable: ties stay in row-major order
            locs.sort_by(|a, b| radius(a).total_cmp(&radius(b)));
        }
        EchoOrdering::Randomized => {
            locs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    let base = locs.len() / n_echoes;
    let extra = locs.len() % n_echoes;
    let mut frames = Vec::with_capacity(n_echoes);
    let mut start = 0;
    for e in 0..n_echoes {
        let len = base + usize::from(e < extra);
        let mut m = Array2::from_elem((nx, ny), false);
        for &idx in &locs[start..start + len] {
            m[idx] = true;
        }
        frames.push(m);
        start += len;
    }
    SamplingMasks::from_frames(&frames)
}

/// Largest grid for which the sparsity bound is materialized.
pub const CRB_MAX_GRID: usize = 4096;
/// Largest support for the sparsity bound.
pub const CRB_MAX_SUPPORT: usize = 256;

/// Trace of the sparsity-informed Cramér–Rao bound for single-echo,
/// single-coil sampling: `trace(G^{-1})` with
/// `G = U^H Ψ F^H M F Ψ^H U` (unit noise variance).
pub fn sparsity_crb(mask: &Mask, model: &SparsityModel) -> Result<f64> {
    let (nx, ny) = mask.dim();
    let n = nx * ny;
    model.validate((nx, ny))?;
    let s = model.support.len();
    if n > CRB_MAX_GRID || s > CRB_MAX_SUPPORT {
        return Err(Error::invalid(format!(
            "bound limited to N <= {CRB_MAX_GRID}, S <= {CRB_MAX_SUPPORT} (got {n}, {s})"
        )));
    }
    if s == 0 {
        return Err(Error::invalid("empty support"));
    }
    let fft = Fft2::new(nx, ny);
    let cols: Vec<Array2<C64>> = model
        .support
        .par_iter()
        .map(|&j| tpsf_column(&fft, mask, model.transform, j))
        .collect();
    let g = DMatrix::from_fn(s, s, |a, b| {
        let ja = model.support[a];
        cols[b][(ja / ny, ja % ny)]
    });
    // G is Hermitian by construction; symmetrize rounding before the eigensolve
    let g = (&g + g.adjoint()) * C64::new(0.5, 0.0);
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-10 * max.max(1e-300)) || max == 0.0 {
        return Err(Error::Singular(format!(
            "support not identifiable under this mask (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    Ok(eig.eigenvalues.iter().map(|l| 1.0 / l).sum())
}
