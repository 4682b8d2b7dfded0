//! Subspace reconstruction of the desk phantom with conjugate gradients and
//! with wavelet-regularized FISTA.

use spinshuffle::encoding::Encoder;
use spinshuffle::phantom::{make_phantom, simulate_acquisition, PhantomSpec};
use spinshuffle::recon::{back_project, cg_solve, fista_solve, nrmse, Regularizer, SolverConfig};
use spinshuffle::sampling::{draw_per_echo_masks, DensityProfile};
use spinshuffle::spin_sim::SequenceParams;
use spinshuffle::subspace::{build_ensemble, compute_basis, sample_prior, TissuePrior};
use spinshuffle::wavelet::Transform;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phantom = make_phantom(&PhantomSpec::desk())?;
    let seq = SequenceParams::cpmg(32, 10.0);
    let basis = compute_basis(&build_ensemble(&sample_prior(&TissuePrior::default(), 256)?, &seq)?, 3)?;
    let masks = draw_per_echo_masks(&DensityProfile::default(), phantom.dims, 32, 1)?;
    let y = simulate_acquisition(&phantom, &seq, &masks, None, 0.005, 2)?;
    let truth = phantom.contrast_images(&seq)?;
    let enc = Encoder::new(masks, None, Some(basis.clone()))?;

    let cfg = SolverConfig { max_iters: 100, tolerance: 1e-6, ..SolverConfig::default() };
    let cg = cg_solve(&enc, &y, &cfg)?;
    println!("cg:    {:>3} iterations, echo NRMSE {:.4}", cg.iterations, nrmse(&back_project(&basis, &cg.images), &truth));

    let (nx, ny) = phantom.dims;
    let cfg = SolverConfig { max_iters: 100, tolerance: 1e-6, lambda: 2e-3, ..SolverConfig::default() };
    let fista = fista_solve(&enc, &y, Regularizer::L1Wavelet(Transform::max_haar(nx, ny)), &cfg)?;
    println!("fista: {:>3} iterations, echo NRMSE {:.4}", fista.iterations, nrmse(&back_project(&basis, &fista.images), &truth));
    let t = &fista.objective_trace;
    println!("fista objective {:.5} -> {:.5}", t[0], t[t.len() - 1]);
    Ok(())
}
