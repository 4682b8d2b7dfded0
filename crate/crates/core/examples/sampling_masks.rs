//! Variable-density masks: per-echo draws, echo assignment of one mask,
//! incoherence (TPSF peak), Monte-Carlo selection and the sparsity bound.

use spinshuffle::sampling::{
    assign_echoes, draw_mask, draw_per_echo_masks, monte_carlo_mask, sparsity_crb, tpsf_peak, uniform_grid_mask,
    DensityProfile, EchoOrdering, SparsityModel,
};
use spinshuffle::wavelet::Transform;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = (64, 64);
    let profile = DensityProfile::default();
    let per_echo = draw_per_echo_masks(&profile, dims, 32, 1)?;
    let n = (dims.0 * dims.1) as f64;
    println!("per-echo masks: mean R = {:.2}", n * 32.0 / per_echo.total() as f64);

    let one = draw_mask(&profile, dims, 1)?;
    for ord in [EchoOrdering::CenterOut, EchoOrdering::Randomized] {
        let m = assign_echoes(&one, 32, ord, 5)?;
        let c = m.counts();
        println!("{:>10}: {} samples split {}..{} per echo", ord.name(), m.total(), c.iter().min().unwrap(), c.iter().max().unwrap());
    }

    let model = SparsityModel::new(Transform::max_haar(dims.0, dims.1), (0..64).collect());
    let regular = uniform_grid_mask(dims, 2, 2);
    println!("TPSF peak: random {:.3}, regular grid {:.3}", tpsf_peak(&one, &model, 16, 3)?, tpsf_peak(&regular, &model, 16, 3)?);
    let mc = monte_carlo_mask(&profile, dims, &model, 8, 16, 100)?;
    println!("Monte-Carlo: best trial {} of {}, peak {:.3}", mc.best_trial, mc.trial_peaks.len(), mc.peak);

    let small = (16, 16);
    let model = SparsityModel::new(Transform::max_haar(16, 16), (0..24).collect());
    let p2 = DensityProfile { accel: 2.0, ..profile };
    let p4 = DensityProfile { accel: 4.0, ..profile };
    for (name, p) in [("R=2", &p2), ("R=4", &p4)] {
        match sparsity_crb(&draw_mask(p, small, 9)?, &model) {
            Ok(b) => println!("sparsity bound {name}: {b:.3}"),
            Err(e) => println!("sparsity bound {name}: {e}"),
        }
    }
    Ok(())
}
