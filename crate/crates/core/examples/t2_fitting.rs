//! Voxel T2 estimation: least squares in the echo domain, in subspace
//! coefficients, and dictionary matching.

use spinshuffle::qmap::{dictionary_match, fit_voxel_nlls, fit_voxel_subspace, Dictionary, FitBounds};
use spinshuffle::spin_sim::{simulate_fse, SequenceParams, TissueParams, C64};
use spinshuffle::subspace::{build_ensemble, compute_basis, sample_prior, TissuePrior};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seq = SequenceParams::ramp(32, 10.0, 120.0, 180.0);
    let truth = TissueParams::new(1000.0, 85.0).with_rho(C64::new(0.6, 0.8));
    let x = simulate_fse(&truth, &seq)?.samples;
    let init = TissueParams::new(1000.0, 100.0);
    let bounds = FitBounds::default();

    let r = fit_voxel_nlls(&x, &seq, &init, &bounds)?;
    println!("echo-domain fit:  T2 {:.6} ms, rho {:.4}", r.t2, r.rho);

    let basis = compute_basis(&build_ensemble(&sample_prior(&TissuePrior::default(), 256)?, &seq)?, 4)?;
    let alpha = basis.coefficients(&x);
    let r = fit_voxel_subspace(&alpha, &basis, &seq, &init, &bounds)?;
    println!("subspace fit K=4: T2 {:.6} ms, rho {:.4}", r.t2, r.rho);

    let dict = Dictionary::t2_grid(1000.0, 1.0, 5.0, 400.0, 0.5, &seq)?;
    let r = dictionary_match(&x, &dict)?;
    println!("dictionary ({} atoms, 0.5 ms step): T2 {} ms", dict.len(), r.t2);

    let wrong_t1 = TissueParams::new(2000.0, 100.0);
    let r = fit_voxel_nlls(&x, &seq, &wrong_t1, &bounds)?;
    println!("fit with nominal T1 2000 ms on a non-CPMG train: T2 {:.3} ms", r.t2);
    Ok(())
}
