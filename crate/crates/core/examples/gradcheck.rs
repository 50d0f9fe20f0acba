//! Reverse-mode gradients against central finite differences, then the same
//! check with a deliberately broken sigmoid backward rule.

use kalmannet::harness::{gradcheck, DEFAULT_TOLERANCE};
use kalmannet::nn::Fault;

fn main() -> kalmannet::Result<()> {
    let seeds: Vec<u64> = (0..10).collect();
    let clean = gradcheck(&seeds, DEFAULT_TOLERANCE, None)?;
    for c in &clean.cases {
        println!("seed {:>2} {:<26} oracle {:.1e} tape {:.1e}", c.seed, c.label, c.oracle_error, c.tape_error);
    }
    println!("clean: max {:.2e}, passed {}", clean.max_error(), clean.passed());
    let broken = gradcheck(&seeds, DEFAULT_TOLERANCE, Some(Fault::SigmoidBackwardScale(1.01)))?;
    println!("faulty sigmoid: max {:.2e}, passed {}", broken.max_error(), broken.passed());
    Ok(())
}
