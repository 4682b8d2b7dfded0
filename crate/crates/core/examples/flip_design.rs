//! Sequence design: Cramér-Rao bound of T2 under a power budget, minimax
//! selection over a tissue range, fixed-amplitude flip design and the
//! two-tissue contrast-optimal echo time.

use spinshuffle::seqopt::{
    crlb, design_asymptotic_flips, fisher_info, minmax_grid_search, optimal_te, optimize_flips, AsymptoticConfig,
    FlipOptConfig, PowerBudget,
};
use spinshuffle::spin_sim::{simulate_fse, Param, SequenceParams, TissueParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tissue = TissueParams::new(1000.0, 100.0);
    let seq = SequenceParams::cpmg(32, 10.0);
    let budget = PowerBudget::of_constant(32, 120.0)?;
    let params = [Param::Rho, Param::T2];
    let bound = |flips: Vec<f64>| crlb(&fisher_info(&tissue, &seq.with_flips(flips), 0.01, &params)?, Param::T2);

    let opt = optimize_flips(&tissue, &seq, &budget, Param::T2, &FlipOptConfig::default())?;
    println!("power budget {:.3} rad^2, optimized uses {:.3}", budget.limit, PowerBudget::usage(&opt.flips_deg));
    println!("CRLB(T2) sd: constant 120 = {:.3} ms, optimized = {:.3} ms", bound(vec![120.0; 32])?.sqrt(), bound(opt.flips_deg.clone())?.sqrt());
    let f = &opt.flips_deg;
    println!("optimized flips (every 4th): {:?}", f.iter().step_by(4).map(|a| a.round()).collect::<Vec<_>>());

    let tissues: Vec<TissueParams> = [40.0, 80.0, 150.0, 300.0].iter().map(|&t2| TissueParams::new(1000.0, t2)).collect();
    let cands = vec![
        SequenceParams::constant(32, 10.0, 120.0),
        SequenceParams::constant(32, 10.0, 150.0),
        SequenceParams::ramp(32, 10.0, 90.0, 180.0),
    ];
    let mm = minmax_grid_search(&tissues, &cands, Param::T2, &params, 0.01)?;
    println!("minimax pick: candidate {} (worst-case CRLB {:?})", mm.best, mm.worst_case);

    // a long-T2 tissue at short spacing can hold its echo amplitude
    let slow = TissueParams::new(1500.0, 400.0);
    let short = SequenceParams::cpmg(32, 5.0);
    let acfg = AsymptoticConfig { s_target: 0.4, ..AsymptoticConfig::default() };
    let design = design_asymptotic_flips(&slow, &short, &acfg)?;
    let sig = simulate_fse(&slow, &short.with_flips(design.flips_deg.clone()))?;
    println!("fixed-amplitude design: {} approach echoes", design.n_approach);
    for (i, (a, s)) in design.flips_deg.iter().zip(&sig.samples).enumerate().take(design.targets.len()) {
        println!("  echo {:>2}: flip {:>7.2}  |s| {:.4}  target {:.4}", i + 1, a, s.norm(), design.targets[i]);
    }
    println!("optimal TE for T2 100 vs 50 ms: {:.4} ms", optimal_te(100.0, 50.0)?);
    Ok(())
}
