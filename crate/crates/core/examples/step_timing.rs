//! Times baseline and two-branch steps on a synthetic batch.
//!
//! cargo run --release --example step_timing -- [mnist|desk] [batch] [reps]

use compnet::data::{synth_multi, Digits, Split, SynthConfig};
use compnet::nn::{Block, Head, NetworkSpec};
use compnet::objective::{two_branch_step, LossConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("desk");
    let batch: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let reps: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let net = match which {
        "mnist" => NetworkSpec::mnist(Head::JointSoftmax),
        _ => NetworkSpec::from_blocks([120, 120, 1], 1, &[Block::new(1, 8), Block::new(1, 16)], 10, Head::JointSoftmax, 1.0)?,
    };
    let digits = Digits::load_dir(std::path::Path::new("data/mnist"), Split::Train)?;
    let samples = synth_multi(&digits, batch, 1, Split::Train, &SynthConfig { k_max: 2, ..Default::default() })?;
    let mut params = net.init_params(0)?;
    for v in [Variant::Baseline, Variant::CompFull] {
        let cfg = LossConfig::new(v);
        let mut times = Vec::new();
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
            let t = Instant::now();
            two_branch_step(&samples, &net, &mut params, &cfg, &mut rng)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        println!("{which} {v}: median {:.3}s per batch of {batch}", times[reps / 2]);
    }
    Ok(())
}
