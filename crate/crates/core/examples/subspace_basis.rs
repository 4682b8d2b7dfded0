//! Temporal subspace learned from a simulated ensemble: relative
//! approximation error against rank.

use spinshuffle::spin_sim::SequenceParams;
use spinshuffle::subspace::{build_ensemble, compute_basis, projection_error, sample_prior, ErrorMetric, TissuePrior};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seq = SequenceParams::cpmg(32, 10.0);
    let prior = TissuePrior::default();
    let tissues = sample_prior(&prior, 256)?;
    let ens = build_ensemble(&tissues, &seq)?;
    println!("ensemble of {} evolutions, T1 {:?} ms, T2 {:?} ms ({})", tissues.len(), prior.t1_range, prior.t2_range, prior.sampling.name());
    println!(" K   frobenius   worst column");
    for k in 1..=8 {
        let b = compute_basis(&ens, k)?;
        let fro = projection_error(&ens, &b, ErrorMetric::FrobeniusRelative)?;
        let worst = projection_error(&ens, &b, ErrorMetric::WorstColumnRelative)?;
        println!("{k:>2} {fro:>11.2e} {worst:>14.2e}");
    }
    Ok(())
}
