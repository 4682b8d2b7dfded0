//! Temporal subspace design from a simulated training ensemble.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spin_sim::{simulate_fse, SequenceParams, TissueParams, C64};

/// How tissue parameters are drawn from their ranges.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSampling {
    LogUniform,
    Uniform,
    /// Use these tissues verbatim.
    Explicit(Vec<TissueParams>),
}

impl PriorSampling {
    pub fn name(&self) -> &'static str {
        match self {
            PriorSampling::LogUniform => "log-uniform",
            PriorSampling::Uniform => "uniform",
            PriorSampling::Explicit(_) => "explicit",
        }
    }
}

/// Prior over relaxation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TissuePrior {
    /// (min, max) in ms.
    pub t1_range: (f64, f64),
    /// (min, max) in ms.
    pub t2_range: (f64, f64),
    pub sampling: PriorSampling,
    pub seed: u64,
}

impl Default for TissuePrior {
    fn default() -> Self {
        Self {
            t1_range: (500.0, 3000.0),
            t2_range: (20.0, 400.0),
            sampling: PriorSampling::LogUniform,
            seed: 0,
        }
    }
}

/// Default training ensemble size.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 256;

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!(
            "{name} range must satisfy 0 < min <= max, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// Draws `l` tissues (ρ = 1, η = 1). Draws with `t2 > t1` are rejected and
/// redrawn, so the result is reproducible from the seed alone.
pub fn sample_prior(prior: &TissuePrior, l: usize) -> Result<Vec<TissueParams>> {
    if l == 0 {
        return Err(Error::invalid("prior sample count must be >= 1"));
    }
    if let PriorSampling::Explicit(list) = &prior.sampling {
        if list.len() != l {
            return Err(Error::invalid(format!(
                "explicit prior lists {} tissues, {l} requested",
                list.len()
            )));
        }
        for t in list {
            t.validate()?;
        }
        return Ok(list.clone());
    }
    check_range("t1", prior.t1_range)?;
    check_range("t2", prior.t2_range)?;
    if prior.t2_range.0 > prior.t1_range.1 {
        return Err(Error::invalid("no (t1, t2) pair in the prior satisfies t2 <= t1"));
    }

    let log = matches!(prior.sampling, PriorSampling::LogUniform);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            return lo;
        }
        if log {
            rng.gen_range(lo.ln()..hi.ln()).exp()
        } else {
            rng.gen_range(lo..hi)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(prior.seed);
    let mut out = Vec::with_capacity(l);
    while out.len() < l {
        let t1 = draw(&mut rng, prior.t1_range);
        let t2 = draw(&mut rng, prior.t2_range);
        if t2 <= t1 {
            out.push(TissueParams::new(t1, t2));
        }
    }
    Ok(out)
}

/// `T×L` matrix of training evolutions, one column per tissue.
#[derive(Clone, Debug)]
pub struct EnsembleMatrix {
    pub data: DMatrix<C64>,
    pub tissues: Vec<TissueParams>,
}

/// Simulates every tissue with unit proton density.
pub fn build_ensemble(tissues: &[TissueParams], seq: &SequenceParams) -> Result<EnsembleMatrix> {
    if tissues.is_empty() {
        return Err(Error::invalid("ensemble needs at least one tissue"));
    }
    let columns = tissues
        .par_iter()
        .map(|t| simulate_fse(&t.with_rho(C64::new(1.0, 0.0)), seq).map(|s| s.samples))
        .collect::<Result<Vec<_>>>()?;
    let t = seq.n_echoes;
    let data = DMatrix::from_fn(t, tissues.len(), |i, l| columns[l][i]);
    Ok(EnsembleMatrix {
        data,
        tissues: tissues.to_vec(),
    })
}

/// Orthonormal temporal basis `Φ_K` (`T×K`) and the full singular spectrum
/// of the ensemble it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    pub phi_k: DMatrix<C64>,
    /// Nonincreasing; empty when the basis was loaded without a spectrum.
    pub singular_values: Vec<f64>,
}

impl SubspaceBasis {
    /// Wraps an externally supplied basis after checking orthonormality.
    pub fn from_columns(phi_k: DMatrix<C64>) -> Result<Self> {
        let gram = phi_k.adjoint() * &phi_k;
        let dev = (gram - DMatrix::<C64>::identity(phi_k.ncols(), phi_k.ncols()))
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        // float32 storage limits how orthonormal a loaded basis can be
        if dev > 1e-5 {
            return Err(Error::invalid(format!(
                "basis columns not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(Self {
            phi_k,
            singular_values: Vec::new(),
        })
    }

    /// Number of echoes `T`.
    pub fn n_echoes(&self) -> usize {
        self.phi_k.nrows()
    }

    /// Subspace size `K`.
    pub fn rank(&self) -> usize {
        self.phi_k.ncols()
    }

    /// Coefficients `α = Φ_K^H x` of a length-T evolution.
    pub fn coefficients(&self, x: &[C64]) -> Vec<C64> {
        (0..self.rank())
            .map(|k| {
                self.phi_k
                    .column(k)
                    .iter()
                    .zip(x)
                    .map(|(p, v)| p.conj() * v)
                    .sum()
            })
            .collect()
    }

    /// Back-projection `x̂ = Φ_K α`.
    pub fn back_project(&self, alpha: &[C64]) -> Vec<C64> {
        (0..self.n_echoes())
            .map(|i| {
                self.phi_k
                    .row(i)
                    .iter()
                    .zip(alpha)
                    .map(|(p, a)| p * a)
                    .sum()
            })
            .collect()
    }
}

/// Top-`k` left singular vectors of the ensemble.
///
/// Columns are made deterministic by rotating each so that its first entry
/// of magnitude above `1e-12` is real and positive.
pub fn compute_basis(x: &EnsembleMatrix, k: usize) -> Result<SubspaceBasis> {
    let (t, l) = x.data.shape();
    let full = t.min(l);
    if k == 0 || k > full {
        return Err(Error::invalid(format!(
            "basis size {k} outside [1, {full}]"
        )));
    }
    let svd = x.data.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Singular("SVD did not return left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    // stable sort keeps ties in solver order
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut phi_k = DMatrix::<C64>::zeros(t, k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let mut col = u.column(src).into_owned();
        if let Some(first) = col.iter().find(|v| v.norm() > 1e-12) {
            let rot = first.conj() / first.norm();
            col *= rot;
        }
        phi_k.set_column(dst, &col);
    }
    let singular_values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(SubspaceBasis {
        phi_k,
        singular_values,
    })
}

/// Approximation-error metric for a basis over an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorMetric {
    /// `‖X − ΦΦ^H X‖_F / ‖X‖_F`.
    FrobeniusRelative,
    /// Largest per-column relative 2-norm error.
    WorstColumnRelative,
}

pub fn projection_error(
    x: &EnsembleMatrix,
    basis: &SubspaceBasis,
    metric: ErrorMetric,
) -> Result<f64> {
    if x.data.nrows() != basis.n_echoes() {
        return Err(Error::dims(
            "projection_error",
            basis.n_echoes(),
            x.data.nrows(),
        ));
    }
    let total = x.data.norm();
    if total == 0.0 {
        return Err(Error::invalid("ensemble has zero norm"));
    }
    let phi = &basis.phi_k;
    let residual = &x.data - phi * (phi.adjoint() * &x.data);
    match metric {
        ErrorMetric::FrobeniusRelative => Ok(residual.norm() / total),
        ErrorMetric::WorstColumnRelative => {
            let mut worst: f64 = 0.0;
            for (r, c) in residual.column_iter().zip(x.data.column_iter()) {
                let n = c.norm();
                if n == 0.0 {
                    return Err(Error::invalid("ensemble contains a zero column"));
                }
                worst = worst.max(r.norm() / n);
            }
            Ok(worst)
        }
    }
}

/// Relative Frobenius residual predicted by the trailing singular values.
pub fn tail_energy_ratio(singular_values: &[f64], k: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let tail: f64 = singular_values.iter().skip(k).map(|s| s * s).sum();
    (tail / total).sqrt()
}
