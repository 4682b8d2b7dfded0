pub mod error;
pub mod spin_sim;
pub mod subspace;
pub mod fft;
pub mod wavelet;
pub mod encoding;
pub mod sampling;
pub mod recon;
pub mod qmap;
pub mod seqopt;
pub mod phantom;
pub mod io;
pub mod config;
pub mod pipeline;
