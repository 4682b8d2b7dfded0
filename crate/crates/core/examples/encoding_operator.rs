//! The subspace encoding operator: adjoint dot test and the precomputed
//! normal kernel against the explicit normal operator.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinshuffle::encoding::{inner, norm_sq, Encoder};
use spinshuffle::phantom::ring_coil_maps;
use spinshuffle::sampling::{draw_per_echo_masks, DensityProfile};
use spinshuffle::spin_sim::{SequenceParams, C64};
use spinshuffle::subspace::{build_ensemble, compute_basis, sample_prior, TissuePrior};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (nx, ny, t, k) = (32, 32, 16, 3);
    let seq = SequenceParams::cpmg(t, 10.0);
    let basis = compute_basis(&build_ensemble(&sample_prior(&TissuePrior::default(), 128)?, &seq)?, k)?;
    let masks = draw_per_echo_masks(&DensityProfile::default(), (nx, ny), t, 7)?;
    let enc = Encoder::new(masks, Some(ring_coil_maps(4, nx, ny)?), Some(basis))?;
    println!("domain {:?}, {} measurements", enc.domain_shape(), enc.n_measurements());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = || C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    let x = Array3::from_shape_fn(enc.domain_shape(), |_| c());
    let y = ndarray::Array1::from_shape_fn(enc.n_measurements(), |_| c());
    let lhs = inner(enc.forward(&x)?.iter(), y.iter());
    let rhs = inner(x.iter(), enc.adjoint(&y)?.iter());
    println!("<Ax, y> = {lhs:.6}\n<x, A^H y> = {rhs:.6}\nrelative gap {:.2e}", (lhs - rhs).norm() / lhs.norm());

    let kernel = enc.build_normal_kernel()?;
    let fast = kernel.apply(&enc, &x)?;
    let slow = enc.normal(&x)?;
    let gap = norm_sq((&fast - &slow).iter()).sqrt() / norm_sq(slow.iter()).sqrt();
    println!("kernel vs explicit normal operator: {gap:.2e}");
    Ok(())
}
