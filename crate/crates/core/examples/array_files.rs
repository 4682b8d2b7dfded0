//! Portable array files and the INI configuration: write, inspect, read.

use ndarray::Array3;
use spinshuffle::config::PipelineConfig;
use spinshuffle::io::{read_array_nd, read_header, write_array};
use spinshuffle::spin_sim::C64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("spinshuffle_array_files");
    let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| C64::new(i as f64, (10 * j + k) as f64));
    write_array(&dir.join("stack"), &a)?;
    println!("header dims (fastest first): {:?}", read_header(&dir.join("stack"))?);
    println!("{}", std::fs::read_to_string(dir.join("stack.hdr"))?.trim_end());
    let b: Array3<C64> = read_array_nd(&dir.join("stack"))?;
    println!("round trip identical: {}", a == b);

    let cfg = PipelineConfig::default().with_seed(42);
    let text = cfg.to_ini();
    println!("\ndefault configuration with seed 42:\n{text}");
    println!("parses back identically: {}", PipelineConfig::from_ini(&text)? == cfg);
    Ok(())
}
